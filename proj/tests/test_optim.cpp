#include "doctest.h"

#include <numbers>
#include <set>
#include <sstream>

#include "softcpt/optim.hpp"
#include "toy.hpp"

using namespace softcpt;

namespace {

Batch unbalanced_joint() {
  Batch b;
  const std::size_t counts[3] = {10, 30, 60};
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t i = 0; i < counts[t]; ++i) {
      b.task.push_back(t);
      b.label.push_back(static_cast<int>(i % 2));
    }
  }
  b.features = Matrix::Zero(static_cast<Eigen::Index>(b.size()), 2);
  for (Eigen::Index i = 0; i < b.features.rows(); ++i) b.features(i, 0) = static_cast<double>(i);
  return b;
}

std::multiset<double> ids(const std::vector<Batch>& batches) {
  std::multiset<double> out;
  for (const Batch& b : batches) {
    for (Eigen::Index i = 0; i < b.features.rows(); ++i) out.insert(b.features(i, 0));
  }
  return out;
}

}  // namespace

TEST_CASE("cosine schedule endpoints") {
  CHECK(cosine_lr(0, 100, 0.002) == 0.002);
  CHECK(std::abs(cosine_lr(100, 100, 0.002)) < 1e-19);
  CHECK(cosine_lr(50, 100, 0.002) == doctest::Approx(0.001).epsilon(1e-14));
  CHECK(cosine_lr(25, 100, 1.0) == doctest::Approx(0.5 * (1 + std::cos(std::numbers::pi / 4))));
  CHECK_THROWS_AS(cosine_lr(101, 100, 0.002), InvalidArgument);
}

TEST_CASE("uniform batches partition the epoch and are seed deterministic") {
  const Batch joint = unbalanced_joint();
  Rng a(1, 2), b(1, 2), c(2, 2);
  const auto ea = make_batches(joint, 32, a);
  const auto eb = make_batches(joint, 32, b);
  const auto ec = make_batches(joint, 32, c);
  CHECK(ea.size() == 4);
  CHECK(ea.back().size() == 4);
  CHECK(ids(ea) == ids(make_batches(joint, 100, c)));
  const auto seen = ids(ea);
  CHECK(seen.size() == 100);
  CHECK(std::set<double>(seen.begin(), seen.end()).size() == 100);
  for (std::size_t i = 0; i < ea.size(); ++i) CHECK(ea[i].features == eb[i].features);
  CHECK(ea[0].features != ec[0].features);
}

TEST_CASE("uniform batches mix tasks in proportion to their share") {
  const Batch joint = unbalanced_joint();
  Rng rng(7);
  const double share[3] = {0.1, 0.3, 0.6};
  double observed[3] = {0, 0, 0};
  const int epochs = 300;
  const int bs = 20;
  for (int e = 0; e < epochs; ++e) {
    const auto batches = make_batches(joint, bs, rng);
    for (std::size_t t : batches.front().task) observed[t] += 1;
  }
  double chi2 = 0;
  for (int t = 0; t < 3; ++t) {
    const double expected = share[t] * bs * epochs;
    chi2 += (observed[t] - expected) * (observed[t] - expected) / expected;
  }
  // 2 degrees of freedom, p = 0.001.
  CHECK(chi2 < 13.82);
}

TEST_CASE("round-robin batches hold a single task and alternate") {
  const Batch joint = unbalanced_joint();
  Rng rng(3);
  const auto batches = make_batches(joint, 10, rng, BatchMode::round_robin);
  CHECK(ids(batches).size() == 100);
  for (const Batch& b : batches) {
    for (std::size_t t : b.task) CHECK(t == b.task.front());
  }
  CHECK(batches[0].task.front() == 0);
  CHECK(batches[1].task.front() == 1);
  CHECK(batches[2].task.front() == 2);
  CHECK(batches[3].task.front() == 1);
  CHECK(parse_batch_mode("round-robin") == BatchMode::round_robin);
  CHECK_THROWS_AS(parse_batch_mode("random"), InvalidArgument);
}

TEST_CASE("empty joint set is a dataset error") {
  Rng rng(1);
  CHECK_THROWS_AS(make_batches(Batch{}, 4, rng), DatasetError);
}

TEST_CASE("sgd step is p - lr * g exactly") {
  ParameterSet p, g;
  p.set("a", Matrix::Constant(2, 2, 1.0));
  p.set("b", Matrix::Constant(1, 3, 5.0));
  g.set("a", Matrix::Constant(2, 2, 0.5));
  sgd_step(p, g, 0.1);
  CHECK(p.at("a") == Matrix::Constant(2, 2, 1.0 - 0.1 * 0.5));
  CHECK(p.at("b") == Matrix::Constant(1, 3, 5.0));
  g.set("b", Matrix::Zero(3, 1));
  CHECK_THROWS_AS(sgd_step(p, g, 0.1), ShapeError);
}

TEST_CASE("zero learning rate leaves parameters bitwise unchanged") {
  const auto inst = toy::make();
  for (Method m : {Method::coop_ca, Method::softcpt_nats}) {
    const PromptModel model = inst.model([&] {
      ModelConfig c;
      c.method = m;
      return c;
    }());
    TrainConfig cfg;
    cfg.lr0 = 0;
    cfg.epochs = 2;
    const TrainResult r = train(model, cfg, inst.train);
    CHECK(r.params == r.initial);
    CHECK_FALSE(r.log.empty());
  }
}

TEST_CASE("training is deterministic and leaves frozen state alone") {
  const auto inst = toy::make();
  const auto fingerprint = inst.encoder->weights_fingerprint();
  const Matrix features = inst.train.features;
  const PromptModel model = inst.model(ModelConfig{});
  TrainConfig cfg;
  cfg.epochs = 3;
  const TrainResult a = train(model, cfg, inst.train);
  const TrainResult b = train(model, cfg, inst.train);
  CHECK(a.params == b.params);
  CHECK(a.buffers == b.buffers);
  CHECK(a.params != a.initial);
  CHECK(inst.encoder->weights_fingerprint() == fingerprint);
  CHECK(inst.train.features == features);
  cfg.seed = 2;
  CHECK(train(model, cfg, inst.train).params != a.params);
}

TEST_CASE("per-task CoOp runs log their own schedule") {
  const auto inst = toy::make();
  ModelConfig mc;
  mc.method = Method::coop_ca;
  const PromptModel model = inst.model(mc);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  const TrainResult r = train(model, cfg, inst.train);
  // 16 samples per class x 4 classes per task = 8 batches per epoch per task.
  CHECK(r.log.size() == 3 * 2 * 8);
  CHECK(r.log.front().run == 0);
  CHECK(r.log.back().run == 2);
  CHECK(r.log[16].lr == cfg.lr0);
  for (std::size_t i = 0; i < r.log.size(); ++i) CHECK(r.log[i].step == i);
}

TEST_CASE("loss goes down on the toy suite") {
  const auto inst = toy::make();
  const PromptModel model = inst.model(ModelConfig{});
  TrainConfig cfg;
  cfg.epochs = 10;
  const TrainResult r = train(model, cfg, inst.train);
  const std::size_t per_epoch = r.log.size() / 10;
  double first = 0, last = 0;
  for (std::size_t i = 0; i < per_epoch; ++i) {
    first += r.log[i].total;
    last += r.log[r.log.size() - 1 - i].total;
  }
  CHECK(last < first);
}

TEST_CASE("training log is tab separated with one loss column per task") {
  std::vector<StepLog> log = {{-1, 0, 0.002, {1.5, 2.5}, 4.0}, {-1, 1, 0.001, {0.5}, 0.5}};
  std::ostringstream os;
  write_train_log(os, log, 2);
  CHECK(os.str() ==
        "# step\tlr\tloss_task0\tloss_task1\ttotal\n"
        "0\t0.002\t1.5\t2.5\t4\n"
        "1\t0.001\t0.5\t0\t0.5\n");
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = TrainConfig{};
  c.lr0 = -1;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
}
