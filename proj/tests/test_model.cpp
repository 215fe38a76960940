#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "softcpt/model.hpp"
#include "softcpt/optim.hpp"
#include "toy.hpp"

using namespace softcpt;

namespace {

// 2 tasks x 3 classes, d_embed 16, short contexts: small enough for full checks.
toy::Instance small_instance() {
  SyntheticSpec s;
  s.tasks = 2;
  s.classes = 3;
  s.train_per_class = 4;
  s.test_per_class = 2;
  s.encoder.d_embed = 16;
  s.encoder.d_txt = 24;
  s.seed = 5;
  toy::Instance i;
  i.suite = generate_synthetic(s);
  i.encoder = std::make_unique<TextEncoder>(*i.suite.encoder);
  i.texts = task_texts(i.suite, i.encoder->spec());
  i.train = split_batch(i.suite, Split::train);
  i.test = split_batch(i.suite, Split::test);
  return i;
}

ModelConfig small_config(Method m, SubnetBody body = SubnetBody::linear) {
  ModelConfig cfg;
  cfg.method = m;
  cfg.body = body;
  cfg.reduction = 2;
  cfg.L = 3;
  cfg.M = 2;
  cfg.K = 2;
  return cfg;
}

// Cross-entropy computed from the public per-task weights, one sample at a time.
double oracle_loss(const PromptModel& model, const ParameterSet& params, const ParameterSet& buffers,
                   const Batch& batch) {
  double total = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const ClassifierWeights w = model.class_weights(params, buffers, batch.task[i]);
    const Vec p = predict_probs(batch.features.row(static_cast<Eigen::Index>(i)).transpose(), w);
    total -= std::log(p(batch.label[i]));
  }
  return total;
}

// Norm-relative error between analytic and central-difference gradients over
// up to `max_coords` evenly spaced coordinates of every tensor.
double grad_error(const PromptModel& model, const ParameterSet& params, const Batch& batch,
                  std::size_t max_coords) {
  ParameterSet buffers;
  Rng init(1);
  model.init_parameters(init, buffers);
  const LossResult r = model.loss_and_grad(params, buffers, batch);
  double diff2 = 0, ref2 = 0;
  for (const auto& name : params.names()) {
    const Matrix& g = r.grads.at(name);
    const auto n = static_cast<std::size_t>(g.size());
    const std::size_t stride = std::max<std::size_t>(1, n / max_coords);
    for (std::size_t k = 0; k < n; k += stride) {
      ParameterSet p = params;
      double* x = p.at(name).data() + k;
      const double saved = *x;
      const double h = 1e-6;
      *x = saved + h;
      ParameterSet b1 = buffers;
      const double up = model.loss(p, b1, batch);
      *x = saved - h;
      ParameterSet b2 = buffers;
      const double down = model.loss(p, b2, batch);
      const double fd = (up - down) / (2 * h);
      const double an = g.data()[k];
      diff2 += (fd - an) * (fd - an);
      ref2 += std::max(fd * fd, an * an);
    }
  }
  return std::sqrt(diff2 / ref2);
}

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.L = 0;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  cfg = ModelConfig{};
  cfg.tau = 0;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  cfg = ModelConfig{};
  cfg.class_sampling_fraction = 0;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  cfg = ModelConfig{};
  cfg.method = Method::softcpt_cata;
  cfg.K = 0;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
}

TEST_CASE("predict_probs: two-class direct formula") {
  // Cosines 0.8 and 0.2 at tau 0.1 are logits 8 and 2.
  Vec x(2);
  x << 1, 0;
  ClassifierWeights w;
  w.tau = 0.1;
  w.rows.resize(2, 2);
  w.rows << 0.8, std::sqrt(1 - 0.64), 0.2, std::sqrt(1 - 0.04);
  const Vec p = predict_probs(x * 3.0, w);
  const double expect = 1.0 / (1.0 + std::exp(-6.0));
  CHECK(p(0) == doctest::Approx(expect).epsilon(1e-13));
  CHECK(p(1) == doctest::Approx(1 - expect).epsilon(1e-12));
  CHECK(p(0) == doctest::Approx(0.9975273768).epsilon(1e-9));
}

TEST_CASE("predict_probs: symmetry, invariances, degenerate input") {
  Rng rng(2);
  ClassifierWeights w;
  const Vec row = l2_normalize(Vec(rng.gaussian(6, 1, 1.0)));
  w.rows = row.transpose().replicate(4, 1);
  const Vec x = rng.gaussian(6, 1, 1.0);
  const Vec u = predict_probs(x, w);
  for (int i = 0; i < 4; ++i) CHECK(u(i) == doctest::Approx(0.25).epsilon(1e-14));

  w.rows = rng.gaussian(5, 6, 1.0).rowwise().normalized();
  const Vec p = predict_probs(x, w);
  Eigen::Index best, other;
  p.maxCoeff(&best);
  CHECK(std::abs(p.sum() - 1) < 1e-14);
  (predict_probs(x * 7.5, w)).maxCoeff(&other);
  CHECK(other == best);
  w.tau = 0.5;
  predict_probs(x, w).maxCoeff(&other);
  CHECK(other == best);
  CHECK_THROWS_AS(predict_probs(Vec::Zero(6), w), DegenerateInputError);
  CHECK_THROWS_AS(predict_probs(Vec::Ones(5), w), ShapeError);
}

TEST_CASE("class weights are unit rows; duplicate names give duplicate rows") {
  auto inst = toy::make();
  inst.texts[0].class_tokens[1] = inst.texts[0].class_tokens[0];
  for (Method m : {Method::coop_ca, Method::coop_mt, Method::softcpt_nata, Method::softcpt_nats}) {
    CAPTURE(to_string(m));
    ModelConfig cfg;
    cfg.method = m;
    const PromptModel model = inst.model(cfg);
    Rng rng(1);
    ParameterSet buffers;
    const ParameterSet p = model.init_parameters(rng, buffers);
    const ClassifierWeights w = model.class_weights(p, buffers, 0);
    for (Eigen::Index r = 0; r < w.rows.rows(); ++r) CHECK(std::abs(w.rows.row(r).norm() - 1) < 1e-12);
    CHECK(w.rows.row(0) == w.rows.row(1));
  }
}

TEST_CASE("perturbing a shared context moves every class row") {
  const auto inst = toy::make();
  ModelConfig cfg;
  cfg.method = Method::coop_mt;
  const PromptModel model = inst.model(cfg);
  Rng rng(1);
  ParameterSet buffers;
  ParameterSet p = model.init_parameters(rng, buffers);
  const ClassifierWeights before = model.class_weights(p, buffers, 1);
  p.at(names::prompt_context_shared())(0, 0) += 0.1;
  const ClassifierWeights after = model.class_weights(p, buffers, 1);
  for (Eigen::Index r = 0; r < before.rows.rows(); ++r) {
    CHECK((before.rows.row(r) - after.rows.row(r)).norm() > 0);
  }
}

TEST_CASE("loss matches a per-sample oracle") {
  const auto inst = toy::make();
  // Two tasks, two samples each.
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < inst.train.size() && rows.size() < 4; ++i) {
    if (inst.train.task[i] < 2 && std::count_if(rows.begin(), rows.end(), [&](std::size_t r) {
          return inst.train.task[r] == inst.train.task[i];
        }) < 2) {
      rows.push_back(i);
    }
  }
  const Batch b = select_rows(inst.train, rows);
  for (Method m : {Method::coop_ca, Method::coop_cs, Method::coop_mt, Method::softcpt_nata,
                   Method::softcpt_nats, Method::softcpt_cata, Method::softcpt_csts}) {
    CAPTURE(to_string(m));
    ModelConfig cfg;
    cfg.method = m;
    const PromptModel model = inst.model(cfg);
    Rng rng(3);
    ParameterSet buffers;
    const ParameterSet p = model.init_parameters(rng, buffers);
    const double value = model.loss(p, buffers, b);
    CHECK(std::abs(value - oracle_loss(model, p, buffers, b)) < 1e-12 * std::max(1.0, value));
  }
}

TEST_CASE("loss groups per task and ignores sample order") {
  const auto inst = toy::make();
  ModelConfig cfg;
  const PromptModel model = inst.model(cfg);
  Rng rng(4);
  ParameterSet buffers;
  const ParameterSet p = model.init_parameters(rng, buffers);
  const Batch b = toy::head(inst.train, 20);
  const LossResult r = model.loss_and_grad(p, buffers, b);
  CHECK(r.per_task.size() == 3);
  CHECK(std::abs(std::accumulate(r.per_task.begin(), r.per_task.end(), 0.0) - r.total) < 1e-12);

  std::vector<std::size_t> order(b.size());
  std::iota(order.begin(), order.end(), 0);
  std::reverse(order.begin(), order.end());
  const double reversed = model.loss(p, buffers, select_rows(b, order));
  CHECK(std::abs(reversed - r.total) < 1e-10 * r.total);
}

TEST_CASE("single task reduces to plain cross-entropy") {
  const auto inst = toy::make();
  ModelConfig cfg;
  cfg.method = Method::coop_ca;
  const PromptModel model = inst.model(cfg);
  Rng rng(5);
  ParameterSet buffers;
  const ParameterSet p = model.init_parameters(rng, buffers);
  const Batch all = task_split_batch(inst.suite, 2, Split::train);
  const ClassifierWeights w = model.class_weights(p, buffers, 2);
  double ce = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const Vec p_i = predict_probs(all.features.row(static_cast<Eigen::Index>(i)).transpose(), w);
    ce -= std::log(p_i(all.label[i]));
  }
  CHECK(model.loss(p, buffers, all) == doctest::Approx(ce).epsilon(1e-12));
}

TEST_CASE("out-of-range labels and tasks are dataset errors") {
  const auto inst = toy::make();
  const PromptModel model = inst.model(ModelConfig{});
  Rng rng(6);
  ParameterSet buffers;
  const ParameterSet p = model.init_parameters(rng, buffers);
  Batch b = toy::head(inst.train, 2);
  b.label[1] = 4;
  CHECK_THROWS_AS(model.loss(p, buffers, b), DatasetError);
  b.label[1] = -1;
  CHECK_THROWS_AS(model.loss(p, buffers, b), DatasetError);
  b = toy::head(inst.train, 2);
  b.task[0] = 3;
  CHECK_THROWS_AS(model.loss(p, buffers, b), DatasetError);
  b = toy::head(inst.train, 2);
  b.features.conservativeResize(2, 10);
  CHECK_THROWS_AS(model.loss(p, buffers, b), ShapeError);
}

TEST_CASE("gradients match central differences for every method and body") {
  const auto inst = small_instance();
  const Batch b = inst.train;
  for (SubnetBody body : {SubnetBody::linear, SubnetBody::mlp}) {
    for (Method m : all_methods()) {
      if (!is_softcpt(m) && body == SubnetBody::mlp) continue;
      CAPTURE(to_string(m));
      CAPTURE(to_string(body));
      const PromptModel model = inst.model(small_config(m, body));
      Rng rng(7);
      ParameterSet buffers;
      ParameterSet p = model.init_parameters(rng, buffers);
      // Larger weights so the generated contexts matter at this scale.
      for (auto& [name, t] : p) {
        if (name.rfind("meta/W", 0) == 0) t *= 10.0;
      }
      CHECK(grad_error(model, p, b, 40) < 1e-6);
    }
  }
}

TEST_CASE("frozen task context receives no gradient") {
  const auto inst = small_instance();
  ModelConfig cfg = small_config(Method::softcpt_nats);
  cfg.freeze_task_context = true;
  const PromptModel model = inst.model(cfg);
  Rng rng(8);
  ParameterSet buffers;
  const ParameterSet p = model.init_parameters(rng, buffers);
  const LossResult r = model.loss_and_grad(p, buffers, inst.train);
  for (const auto& [name, g] : r.grads) CHECK(name.rfind("task_ctx/", 0) != 0);
  CHECK(r.grads.contains(names::meta_w()));
}

TEST_CASE("class sampling keeps every label in the batch") {
  const auto inst = toy::make();
  ModelConfig full_cfg;
  full_cfg.method = Method::softcpt_cata;
  ModelConfig sampled_cfg = full_cfg;
  sampled_cfg.class_sampling_fraction = 0.25;
  const PromptModel full = inst.model(full_cfg);
  const PromptModel sampled = inst.model(sampled_cfg);
  Rng init(9);
  ParameterSet buffers;
  const ParameterSet p = full.init_parameters(init, buffers);

  // Every class present: sampling cannot drop any, so the loss is unchanged.
  Rng sampler(1);
  const double a = full.loss(p, buffers, inst.train);
  const double b = sampled.loss_and_grad(p, buffers, inst.train, &sampler).total;
  CHECK(std::abs(a - b) < 1e-12 * a);

  // One sample and a quarter of four classes: only its own class is scored.
  const Batch one = toy::head(inst.train, 1);
  CHECK(sampled.loss_and_grad(p, buffers, one, &sampler).total == 0.0);
  // Half: its class plus one other, so the loss lies between.
  ModelConfig half_cfg = full_cfg;
  half_cfg.class_sampling_fraction = 0.5;
  const double half = inst.model(half_cfg).loss_and_grad(p, buffers, one, &sampler).total;
  CHECK(half >= 0);
  CHECK(half <= full.loss(p, buffers, one) + 1e-12);
  CHECK_THROWS_AS(sampled.loss_and_grad(p, buffers, one), InvalidArgument);
}

TEST_CASE("N/A variants report task features and context gradients") {
  const auto inst = small_instance();
  const PromptModel model = inst.model(small_config(Method::softcpt_nata));
  Rng rng(10);
  ParameterSet buffers;
  const ParameterSet p = model.init_parameters(rng, buffers);
  const LossResult r = model.loss_and_grad(p, buffers, inst.train);
  REQUIRE(r.task_features.size() == 2);
  REQUIRE(r.context_grads.size() == 2);
  // dL/dW = sum_t g_t d_t^T for the linear body.
  Matrix expect = Matrix::Zero(p.at(names::meta_w()).rows(), p.at(names::meta_w()).cols());
  for (std::size_t t = 0; t < 2; ++t) expect += r.task_features[t] * r.context_grads[t].transpose();
  CHECK((expect - r.grads.at(names::meta_w())).norm() < 1e-12 * expect.norm());
}
