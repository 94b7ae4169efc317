// Exercises the shared library through its C header only.
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <string>
#include <thread>
#include <vector>

#include "lcflow/lcflow.h"
#include "tempdir.hpp"

namespace {

std::string str(const std::filesystem::path& p) { return p.string(); }

lcf_config* tiny_config() {
  lcf_config* c = nullptr;
  REQUIRE(lcf_config_create(&c) == LCF_OK);
  REQUIRE(lcf_config_set(c, "epochs", "2") == LCF_OK);
  REQUIRE(lcf_config_set(c, "hidden_width", "8") == LCF_OK);
  REQUIRE(lcf_config_set(c, "batch_size", "16") == LCF_OK);
  return c;
}

}  // namespace

TEST_CASE("status strings and version") {
  CHECK(std::string(lcf_version()).size() > 0);
  CHECK(std::string(lcf_status_string(LCF_OK)) == "ok");
  for (int s = 1; s <= 7; ++s) CHECK(std::string(lcf_status_string(static_cast<lcf_status>(s))) != "ok");
}

TEST_CASE("errors set the thread-local message and success clears it") {
  lcf_config* c = nullptr;
  REQUIRE(lcf_config_create(&c) == LCF_OK);
  CHECK(lcf_config_set(c, "no_such_key", "1") == LCF_ERR_INVALID_ARGUMENT);
  CHECK(std::string(lcf_last_error()).find("no_such_key") != std::string::npos);
  std::string other_thread = "unset";
  std::thread([&] { other_thread = lcf_last_error(); }).join();
  CHECK(other_thread.empty());
  CHECK(lcf_config_set(c, "epochs", "3") == LCF_OK);
  CHECK(std::string(lcf_last_error()).empty());
  // A rejected value leaves the config untouched.
  CHECK(lcf_config_set(c, "dequant_alpha", "0.7") == LCF_ERR_INVALID_ARGUMENT);
  char buf[64];
  REQUIRE(lcf_config_get(c, "dequant_alpha", buf, sizeof buf) == LCF_OK);
  CHECK(std::stod(buf) == 0.05);
  REQUIRE(lcf_config_get(c, "epochs", buf, sizeof buf) == LCF_OK);
  CHECK(std::string(buf) == "3");
  CHECK(lcf_config_create(nullptr) == LCF_ERR_INVALID_ARGUMENT);
  lcf_config_destroy(c);
  lcf_config_destroy(nullptr);
}

TEST_CASE("file errors map to io and corrupt") {
  TempDir dir;
  lcf_model* m = nullptr;
  CHECK(lcf_model_load(str(dir / "missing.ffm").c_str(), &m) == LCF_ERR_IO);
  CHECK(m == nullptr);
  std::ofstream(dir / "junk.ffm") << "not a model";
  CHECK(lcf_model_load(str(dir / "junk.ffm").c_str(), &m) == LCF_ERR_CORRUPT);
  lcf_plan* p = nullptr;
  std::ofstream(dir / "junk.ffplan") << "FFPLAN 1\nnonsense\n";
  CHECK(lcf_plan_load(str(dir / "junk.ffplan").c_str(), &p) == LCF_ERR_CORRUPT);
  CHECK(std::string(lcf_last_error()).size() > 0);
}

TEST_CASE("dataset, plan and config round trips") {
  TempDir dir;
  lcf_dataset* d = nullptr;
  REQUIRE(lcf_dataset_generate(30, 8, 1, 4, 1.0, 0.2, &d) == LCF_OK);
  size_t n = 0, n_train = 0, side = 0, ch = 0;
  REQUIRE(lcf_dataset_info(d, &n, &n_train, &side, &ch) == LCF_OK);
  CHECK(n == 30);
  CHECK(n_train == 24);
  CHECK(side == 8);
  CHECK(ch == 1);
  REQUIRE(lcf_dataset_save(d, str(dir / "d.fft").c_str()) == LCF_OK);
  lcf_dataset* back = nullptr;
  REQUIRE(lcf_dataset_load(str(dir / "d.fft").c_str(), &back) == LCF_OK);
  std::vector<double> a(64), b(64);
  REQUIRE(lcf_dataset_image(d, 29, a.data(), a.size()) == LCF_OK);
  REQUIRE(lcf_dataset_image(back, 29, b.data(), b.size()) == LCF_OK);
  CHECK(a == b);
  CHECK(lcf_dataset_image(d, 30, a.data(), a.size()) == LCF_ERR_INVALID_ARGUMENT);
  CHECK(lcf_dataset_image(d, 0, a.data(), 10) == LCF_ERR_SHAPE);
  CHECK(lcf_dataset_generate(10, 7, 1, 0, 1.0, 0.2, &back) == LCF_ERR_INVALID_ARGUMENT);

  lcf_plan* p = nullptr;
  CHECK(lcf_plan_derive("lcma", 8, 1, 2, 0, nullptr, &p) == LCF_ERR_INVALID_ARGUMENT);
  CHECK(lcf_plan_derive("sideways", 8, 1, 2, 0, nullptr, &p) == LCF_ERR_INVALID_ARGUMENT);
  REQUIRE(lcf_plan_derive("random", 8, 1, 2, 11, nullptr, &p) == LCF_OK);
  REQUIRE(lcf_plan_save(p, str(dir / "p.ffplan").c_str()) == LCF_OK);
  lcf_plan* q = nullptr;
  REQUIRE(lcf_plan_load(str(dir / "p.ffplan").c_str(), &q) == LCF_OK);
  size_t need_p = 0, need_q = 0;
  REQUIRE(lcf_plan_format(p, nullptr, 0, &need_p) == LCF_OK);
  REQUIRE(lcf_plan_format(q, nullptr, 0, &need_q) == LCF_OK);
  REQUIRE(need_p == need_q);
  std::string tp(need_p, '\0'), tq(need_q, '\0');
  lcf_plan_format(p, tp.data(), tp.size(), nullptr);
  lcf_plan_format(q, tq.data(), tq.size(), nullptr);
  CHECK(tp == tq);
  CHECK(read_bytes(dir / "p.ffplan") == tp.substr(0, tp.size() - 1));

  lcf_config* c = tiny_config();
  REQUIRE(lcf_config_save(c, str(dir / "c.cfg").c_str()) == LCF_OK);
  lcf_config* c2 = nullptr;
  REQUIRE(lcf_config_load(str(dir / "c.cfg").c_str(), &c2) == LCF_OK);
  char buf[32];
  REQUIRE(lcf_config_get(c2, "hidden_width", buf, sizeof buf) == LCF_OK);
  CHECK(std::string(buf) == "8");

  lcf_plan_destroy(p);
  lcf_plan_destroy(q);
  lcf_config_destroy(c);
  lcf_config_destroy(c2);
  lcf_dataset_destroy(d);
  lcf_dataset_destroy(back);
}

TEST_CASE("pretrain, plan, train, evaluate, sample, interpolate") {
  TempDir dir;
  lcf_dataset* d = nullptr;
  REQUIRE(lcf_dataset_generate(40, 8, 1, 5, 1.0, 0.25, &d) == LCF_OK);
  lcf_config* c = tiny_config();
  lcf_model* pre = nullptr;
  lcf_maps* maps = nullptr;
  lcf_metrics* pm = nullptr;
  REQUIRE(lcf_pretrain(c, d, &pre, &maps, &pm) == LCF_OK);
  size_t count = 0;
  REQUIRE(lcf_maps_count(maps, &count) == LCF_OK);
  CHECK(count == 2);
  lcf_maps* again = nullptr;
  REQUIRE(lcf_maps_compute(pre, c, d, &again) == LCF_OK);
  REQUIRE(lcf_maps_save(maps, str(dir / "a.ffmaps").c_str()) == LCF_OK);
  REQUIRE(lcf_maps_save(again, str(dir / "b.ffmaps").c_str()) == LCF_OK);
  CHECK(read_bytes(dir / "a.ffmaps") == read_bytes(dir / "b.ffmaps"));

  lcf_plan* plan = nullptr;
  REQUIRE(lcf_plan_derive("lcma", 8, 1, 2, 0, maps, &plan) == LCF_OK);
  lcf_model* m = nullptr;
  lcf_metrics* met = nullptr;
  REQUIRE(lcf_train(c, d, plan, &m, &met) == LCF_OK);
  REQUIRE(lcf_metrics_epochs(met, &count) == LCF_OK);
  CHECK(count == 3);
  double train_bpd = 0, valid_bpd = 0;
  REQUIRE(lcf_metrics_epoch(met, 2, &train_bpd, &valid_bpd, nullptr) == LCF_OK);
  CHECK(std::isfinite(valid_bpd));

  size_t dims = 0, layers = 0, factors = 0, params = 0;
  REQUIRE(lcf_model_info(m, &dims, &layers, &factors, &params) == LCF_OK);
  CHECK(dims == 64);
  CHECK(factors == 2);
  CHECK(params > 0);
  REQUIRE(lcf_model_save(m, str(dir / "m.ffm").c_str()) == LCF_OK);
  lcf_model* loaded = nullptr;
  REQUIRE(lcf_model_load(str(dir / "m.ffm").c_str(), &loaded) == LCF_OK);
  double e1 = 0, e2 = 0;
  REQUIRE(lcf_evaluate_bpd(m, d, LCF_SPLIT_VALID, 0.05, &e1) == LCF_OK);
  REQUIRE(lcf_evaluate_bpd(loaded, d, LCF_SPLIT_VALID, 0.05, &e2) == LCF_OK);
  CHECK(e1 == e2);

  lcf_dataset* wrong = nullptr;
  REQUIRE(lcf_dataset_generate(10, 4, 1, 0, 1.0, 0.2, &wrong) == LCF_OK);
  CHECK(lcf_evaluate_bpd(m, wrong, LCF_SPLIT_VALID, 0.05, &e1) == LCF_ERR_SHAPE);
  lcf_plan* small = nullptr;
  REQUIRE(lcf_plan_derive("static", 4, 1, 2, 0, nullptr, &small) == LCF_OK);
  CHECK(lcf_train(c, d, small, nullptr, nullptr) == LCF_ERR_SHAPE);

  std::vector<double> s1(3 * 64), s2(3 * 64);
  REQUIRE(lcf_sample(m, 3, 9, 0.05, s1.data(), s1.size()) == LCF_OK);
  REQUIRE(lcf_sample(m, 3, 9, 0.05, s2.data(), s2.size()) == LCF_OK);
  CHECK(s1 == s2);
  CHECK(lcf_sample(m, 3, 9, 0.05, s1.data(), 10) == LCF_ERR_SHAPE);

  std::vector<double> a(64), b(64), frames(5 * 64);
  lcf_dataset_image(d, 0, a.data(), 64);
  lcf_dataset_image(d, 1, b.data(), 64);
  REQUIRE(lcf_interpolate(m, a.data(), b.data(), 64, 5, 0.05, frames.data(), frames.size()) == LCF_OK);
  double err = 0;
  for (size_t i = 0; i < 64; ++i) {
    err = std::max(err, std::abs(frames[i] - a[i]));
    err = std::max(err, std::abs(frames[4 * 64 + i] - b[i]));
  }
  CHECK(err < 1e-6);
  REQUIRE(lcf_interpolate_grid(m, d, 0, 1, 5, 0.05, str(dir / "i.pgm").c_str()) == LCF_OK);
  CHECK(read_bytes(dir / "i.pgm").rfind("P5\n40 8\n255\n", 0) == 0);
  REQUIRE(lcf_sample_grid(m, 4, 1, 0.05, str(dir / "s.pgm").c_str()) == LCF_OK);
  CHECK(read_bytes(dir / "s.pgm").rfind("P5\n", 0) == 0);

  lcf_plan_destroy(small);
  lcf_dataset_destroy(wrong);
  lcf_model_destroy(loaded);
  lcf_metrics_destroy(met);
  lcf_model_destroy(m);
  lcf_plan_destroy(plan);
  lcf_maps_destroy(again);
  lcf_maps_destroy(maps);
  lcf_metrics_destroy(pm);
  lcf_model_destroy(pre);
  lcf_config_destroy(c);
  lcf_dataset_destroy(d);
}

TEST_CASE("ablation through the C API") {
  TempDir dir;
  lcf_dataset* d = nullptr;
  REQUIRE(lcf_dataset_generate(40, 8, 1, 6, 1.0, 0.25, &d) == LCF_OK);
  lcf_config* c = tiny_config();
  REQUIRE(lcf_config_set(c, "epochs", "1") == LCF_OK);
  lcf_ablation* ab = nullptr;
  REQUIRE(lcf_ablate(c, d, 2, 1, str(dir.path).c_str(), 0, &ab) == LCF_OK);
  size_t rows = 0;
  REQUIRE(lcf_ablation_rows(ab, &rows) == LCF_OK);
  CHECK(rows == 8);
  const char* names[] = {"random", "reverse-lcma", "static-realnvp", "lcma"};
  for (size_t k = 0; k < 4; ++k) {
    const char* tag = nullptr;
    double mean = 0, sd = 0;
    REQUIRE(lcf_ablation_summary(ab, k, &tag, &mean, &sd) == LCF_OK);
    CHECK(std::string(tag) == names[k]);
    CHECK(std::isfinite(mean));
  }
  CHECK(std::filesystem::exists(dir / "ablation.csv"));
  CHECK(std::filesystem::exists(dir / "plans" / "lcma_seed1.ffplan"));
  CHECK(lcf_ablate(c, d, 0, 1, nullptr, 0, &ab) == LCF_ERR_INVALID_ARGUMENT);
  lcf_ablation_destroy(ab);
  lcf_config_destroy(c);
  lcf_dataset_destroy(d);
}
