#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "sada/synth.hpp"
#include "sada/train.hpp"

using namespace sada;

namespace {

std::vector<SynthDomainSpec> tiny_domains() {
  std::vector<SynthDomainSpec> domains(3);
  domains[0].id = 0;
  domains[0].tint = {1.00, 1.00, 1.00};
  domains[1].id = 1;
  domains[1].tint = {1.45, 0.72, 1.10};
  domains[2].id = 2;
  domains[2].tint = {0.505, 1.308, 0.890};
  for (auto& d : domains) {
    d.noise_sigma = 1.0;
    d.tint_jitter = 0.10;
    d.class_shapes = default_class_shapes();
  }
  return domains;
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.steps_per_stage = 25;
  cfg.batch_size = 8;
  cfg.learning_rate = 0.003;
  cfg.learning_rate_stage2 = 0.8;
  cfg.learning_rate_erm = 0.4;
  cfg.k = 2;
  cfg.beta = 0.1;
  cfg.tau = 0.07;
  cfg.seed = 5;
  cfg.encoder.feature_dim = 16;
  cfg.encoder.embed_dim = 8;
  cfg.encoder.local_dim = 8;
  cfg.snmf = {2, 0.1, 60, 1e-5, 0, 0.15};
  return cfg;
}

Dataset tiny_dataset(std::uint64_t seed, std::size_t n_per_class = 4,
                     std::size_t n_domains = 2) {
  auto sets = synth_dataset(tiny_domains(), n_per_class, {1.0, 1.0, 1.0, 1.0, 1.0}, seed);
  sets.resize(n_domains);
  return Dataset::concat(sets);
}

std::uint64_t full_hash(const Stage1Model& model) {
  std::uint64_t h = model.encoder.parameter_hash();
  h = hash_doubles(h, model.local.hidden.w);
  h = hash_doubles(h, model.local.output.w);
  return h;
}

}  // namespace

TEST_CASE("synth dataset honors counts, determinism, and validation") {
  const auto domains = tiny_domains();
  const auto sets = synth_dataset(domains, 4, {10, 5, 2, 1, 1}, 99);
  REQUIRE(sets.size() == 3);
  for (const auto& set : sets) {
    std::vector<int> counts(5, 0);
    for (int y : set.labels) ++counts[y];
    CHECK(counts == std::vector<int>{40, 20, 8, 4, 4});
  }
  // equal ratios give equal counts
  const auto equal = synth_dataset(domains, 3, {1, 1, 1, 1, 1}, 99);
  std::vector<int> counts(5, 0);
  for (int y : equal[0].labels) ++counts[y];
  CHECK(counts == std::vector<int>{3, 3, 3, 3, 3});

  const auto a = synth_dataset(domains, 2, {1, 1, 1, 1, 1}, 7);
  const auto b = synth_dataset(domains, 2, {1, 1, 1, 1, 1}, 7);
  for (std::size_t d = 0; d < 3; ++d)
    for (std::size_t i = 0; i < a[d].images.size(); ++i)
      CHECK(a[d].images[i] == b[d].images[i]);

  CHECK_THROWS_AS(synth_dataset({domains[0], domains[1]}, 2, {1, 1}, 0),
                  std::invalid_argument);
  CHECK_THROWS_AS(synth_dataset(domains, 2, {1.0}, 0), std::invalid_argument);
  CHECK_THROWS_AS(synth_dataset(domains, 2, {1.0, -1.0}, 0), std::invalid_argument);
  SynthDomainSpec spec = domains[0];
  Rng rng(1);
  CHECK_THROWS_AS(render_cell_image(spec.class_shapes[0], spec, rng, 4),
                  std::invalid_argument);
}

TEST_CASE("stage 1 training is deterministic and records its loss curve") {
  const Dataset data = tiny_dataset(11);
  const TrainConfig cfg = tiny_config();
  const Stage1Model a = train_stage1(data, cfg);
  const Stage1Model b = train_stage1(data, cfg);
  REQUIRE(a.loss_curve.size() == cfg.steps_per_stage);
  CHECK(a.loss_curve == b.loss_curve);
  CHECK(full_hash(a) == full_hash(b));
  for (double v : a.loss_curve) CHECK(std::isfinite(v));
}

TEST_CASE("zero learning rate leaves stage-1 parameters at initialization") {
  const Dataset data = tiny_dataset(12);
  TrainConfig cfg = tiny_config();
  cfg.steps_per_stage = 5;
  cfg.learning_rate = 0.0;
  const Stage1Model trained = train_stage1(data, cfg);
  Rng init_rng(Rng::derive(cfg.seed, 0x494e4954));
  const PatchLinearEncoder fresh(cfg.encoder, init_rng);
  CHECK(trained.encoder.patch_map.w == fresh.patch_map.w);
  CHECK(trained.encoder.projector.w == fresh.projector.w);
}

TEST_CASE("stage 1 loss decreases on a small separable set") {
  const Dataset data = tiny_dataset(13, 6);
  TrainConfig cfg = tiny_config();
  cfg.steps_per_stage = 200;
  cfg.beta = 0.0;
  const Stage1Model model = train_stage1(data, cfg);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 10; ++i) {
    head += model.loss_curve[i] / 10.0;
    tail += model.loss_curve[cfg.steps_per_stage - 10 + i] / 10.0;
  }
  CHECK(tail < 0.9 * head);
}

TEST_CASE("stage 2 never mutates encoder parameters") {
  const Dataset data = tiny_dataset(14);
  TrainConfig cfg = tiny_config();
  const Stage1Model stage1 = train_stage1(data, cfg);
  const std::uint64_t before = stage1.encoder.parameter_hash();
  const Stage2Result stage2 = train_stage2(stage1, data, cfg);
  CHECK(stage1.encoder.parameter_hash() == before);
  REQUIRE(stage2.loss_curve.size() == cfg.steps_per_stage);
  CHECK(stage2.loss_curve.back() < stage2.loss_curve.front());
}

TEST_CASE("stage 2 with zero steps yields the zero-initialized classifier") {
  const Dataset data = tiny_dataset(15);
  TrainConfig cfg = tiny_config();
  cfg.steps_per_stage = 5;
  const Stage1Model stage1 = train_stage1(data, cfg);
  cfg.steps_per_stage = 0;
  const Stage2Result stage2 = train_stage2(stage1, data, cfg);
  CHECK(stage2.loss_curve.empty());
  for (double w : stage2.classifier.linear.w) CHECK(w == 0.0);
}

TEST_CASE("stage 2 reaches full training accuracy on separable embeddings") {
  // two classes with drastically different morphology and no noise
  std::vector<SynthDomainSpec> domains = tiny_domains();
  for (auto& d : domains) {
    d.noise_sigma = 0.0;
    d.class_shapes = {ClassShape{3.0, 1.0, 0.0, 0.0, 1}, ClassShape{11.0, 1.0, 0.0, 0.0, 1}};
  }
  const auto sets = synth_dataset(domains, 8, {1.0, 1.0}, 21);
  const Dataset data = Dataset::concat({sets[0]});
  TrainConfig cfg = tiny_config();
  cfg.steps_per_stage = 0;
  const Stage1Model frozen = train_stage1(data, cfg);  // encoder at initialization
  cfg.steps_per_stage = 500;
  const Stage2Result stage2 = train_stage2(frozen, data, cfg);
  const Confusion confusion = evaluate(frozen.encoder, stage2.classifier, data);
  CHECK(f1_scores(confusion).micro == 1.0);
}

TEST_CASE("single-class training predicts that class everywhere") {
  Dataset data = tiny_dataset(16);
  for (auto& y : data.labels) y = 0;
  TrainConfig cfg = tiny_config();
  cfg.steps_per_stage = 20;
  const Stage1Model stage1 = train_stage1(data, cfg);
  const Stage2Result stage2 = train_stage2(stage1, data, cfg);
  const Confusion confusion = evaluate(stage1.encoder, stage2.classifier, data);
  CHECK(confusion.at(0, 0) == static_cast<long long>(data.size()));
}

TEST_CASE("erm baseline is deterministic and its loss decreases") {
  const Dataset data = tiny_dataset(17);
  TrainConfig cfg = tiny_config();
  cfg.steps_per_stage = 120;
  const ErmModel a = train_erm_baseline(data, cfg);
  const ErmModel b = train_erm_baseline(data, cfg);
  CHECK(a.loss_curve == b.loss_curve);
  CHECK(a.encoder.parameter_hash() == b.encoder.parameter_hash());
  CHECK(a.loss_curve.back() < a.loss_curve.front());
}

TEST_CASE("erm reaches 0.9 micro f1 on an in-domain split") {
  auto domains = tiny_domains();
  domains.resize(3);
  const auto train_sets = synth_dataset(domains, 40, {2, 1, 1, 1, 1}, 31);
  const auto test_sets = synth_dataset(domains, 12, {2, 1, 1, 1, 1}, 32);
  const Dataset train = Dataset::concat({train_sets[0]});
  const Dataset test = Dataset::concat({test_sets[0]});
  TrainConfig cfg = tiny_config();
  cfg.batch_size = 16;
  cfg.encoder.feature_dim = 64;
  cfg.encoder.embed_dim = 16;
  cfg.encoder.local_dim = 16;
  cfg.steps_per_stage = 2000;
  const ErmModel erm = train_erm_baseline(train, cfg);
  const F1Scores scores = f1_scores(evaluate(erm.encoder, erm.classifier, test));
  CHECK(scores.micro >= 0.9);
}

TEST_CASE("leave-one-domain-out produces one paired report per domain") {
  const auto domains = tiny_domains();
  const auto train_sets = synth_dataset(domains, 3, {1, 1, 1, 1, 1}, 41);
  const auto test_sets = synth_dataset(domains, 2, {1, 1, 1, 1, 1}, 42);
  TrainConfig cfg = tiny_config();
  cfg.steps_per_stage = 10;
  const auto reports = loo_experiment(train_sets, test_sets, cfg);
  REQUIRE(reports.size() == 3);
  for (std::size_t d = 0; d < 3; ++d) {
    CHECK(reports[d].held_out_domain == domains[d].id);
    for (const TrainReport* r : {&reports[d].sada, &reports[d].erm}) {
      CHECK(r->holdout_f1.micro >= 0.0);
      CHECK(r->holdout_f1.micro <= 1.0);
      CHECK(r->holdout_f1.macro >= 0.0);
      CHECK(r->holdout_f1.macro <= 1.0);
      CHECK(r->holdout_confusion.total() ==
            static_cast<long long>(test_sets[d].images.size()));
    }
  }
  CHECK_THROWS_AS(loo_experiment({train_sets[0], train_sets[1]},
                                 {test_sets[0], test_sets[1]}, cfg),
                  std::invalid_argument);
}

TEST_CASE("train config validation") {
  TrainConfig cfg = tiny_config();
  cfg.k = 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.tau = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.batch_size = 2;  // < k is invalid
  cfg.k = 3;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
