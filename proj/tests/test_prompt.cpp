#include "doctest.h"

#include <set>

#include "softcpt/optim.hpp"
#include "softcpt/prompt.hpp"
#include "toy.hpp"

using namespace softcpt;

TEST_CASE("method names round-trip") {
  for (Method m : all_methods()) CHECK(parse_method(to_string(m)) == m);
  CHECK(softcpt_variants().size() == 6);
  CHECK_THROWS_AS(parse_method("softcpt"), InvalidArgument);
}

TEST_CASE("method predicates follow the variant naming") {
  CHECK_FALSE(is_softcpt(Method::coop_mt));
  CHECK(is_softcpt(Method::softcpt_nata));
  CHECK_FALSE(uses_class_features(Method::softcpt_nats));
  CHECK(uses_class_features(Method::softcpt_cats));
  CHECK(class_specific_class_context(Method::softcpt_csts));
  CHECK_FALSE(class_specific_class_context(Method::softcpt_cata));
  CHECK(task_specific_task_context(Method::softcpt_cats));
  CHECK_FALSE(task_specific_task_context(Method::softcpt_csta));
}

TEST_CASE("init_context: deterministic, zero mean, std 0.02") {
  Rng a(5), b(5);
  const Matrix m = init_context(400, 250, a);
  CHECK(m == init_context(400, 250, b));
  const double n = static_cast<double>(m.size());
  const double mean = m.mean();
  const double sd = std::sqrt((m.array() - mean).square().sum() / n);
  CHECK(std::abs(mean) < 3 * kContextInitStd / std::sqrt(n));
  CHECK(std::abs(sd - kContextInitStd) < 0.05 * kContextInitStd);
  CHECK_THROWS_AS(init_context(2, 0, a), InvalidArgument);
}

TEST_CASE("build_class_prompt: prefix structure") {
  Rng rng(1);
  const Matrix ctx = init_context(16, 32, rng);
  const TokenSequence cls = rng.gaussian(3, 32, 1.0);
  const TokenSequence p = build_class_prompt(ctx, cls);
  CHECK(p.rows() == 19);
  CHECK(p.topRows(16) == ctx);
  CHECK(p.bottomRows(3) == cls);
  CHECK(build_class_prompt(Matrix(0, 32), cls) == cls);
  CHECK_THROWS_AS(build_class_prompt(init_context(2, 16, rng), cls), ShapeError);
}

TEST_CASE("build_task_prompt: shared and per-task owners") {
  Rng rng(2);
  const TokenSequence t0 = rng.gaussian(2, 32, 1.0);
  const TokenSequence t1 = rng.gaussian(3, 32, 1.0);

  TaskContext shared{ContextOwner::shared, {init_context(8, 32, rng)}};
  const TokenSequence p0 = build_task_prompt(shared, t0, 0);
  const TokenSequence p1 = build_task_prompt(shared, t1, 1);
  CHECK(p0.rows() == 10);
  CHECK(p1.rows() == 11);
  CHECK(p0.topRows(8) == p1.topRows(8));

  TaskContext per{ContextOwner::per_owner, {init_context(8, 32, rng), init_context(8, 32, rng)}};
  CHECK(build_task_prompt(per, t0, 1).topRows(8) == per.blocks[1]);
  CHECK_THROWS_AS(build_task_prompt(per, t0, 2), InvalidArgument);

  TaskContext empty{ContextOwner::shared, {Matrix(0, 32)}};
  CHECK(build_task_prompt(empty, t0, 0) == t0);
}

TEST_CASE("augment_task_feature concatenates task first") {
  Vec a(2), b(2);
  a << 1, 2;
  b << 3, 4;
  const Vec ab = augment_task_feature(a, b);
  CHECK(ab.size() == 4);
  CHECK(ab.head(2) == a);
  CHECK(ab.tail(2) == b);
  CHECK_THROWS_AS(augment_task_feature(a, Vec::Zero(3)), ShapeError);
}

TEST_CASE("parameter names are stable and distinct") {
  std::set<std::string> all = {names::prompt_context_shared(), names::prompt_context_task(0),
                               names::prompt_context_class(0), names::task_context_shared(),
                               names::task_context(0), names::task_context(1),
                               names::class_context_shared(), names::class_context(0)};
  CHECK(all.size() == 8);
  CHECK(names::task_context(3) == "task_ctx/task/00003");
}

TEST_CASE("context census per variant") {
  const auto inst = toy::make();
  const std::size_t T = inst.suite.tasks.size();
  const std::size_t C = inst.suite.total_classes();
  struct Expect {
    Method m;
    std::size_t task_blocks, class_blocks;
  };
  for (const Expect& e : {Expect{Method::softcpt_nata, 1, 0}, Expect{Method::softcpt_nats, T, 0},
                          Expect{Method::softcpt_cata, 1, 1}, Expect{Method::softcpt_csta, 1, C},
                          Expect{Method::softcpt_cats, T, 1}, Expect{Method::softcpt_csts, T, C}}) {
    CAPTURE(to_string(e.m));
    ModelConfig cfg;
    cfg.method = e.m;
    const PromptModel model = inst.model(cfg);
    Rng rng(1);
    ParameterSet buffers;
    const ParameterSet p = model.init_parameters(rng, buffers);
    std::size_t task_blocks = 0, class_blocks = 0;
    for (const auto& [name, m] : p) {
      if (name.rfind("task_ctx/", 0) == 0) ++task_blocks;
      if (name.rfind("class_ctx/", 0) == 0) ++class_blocks;
      CHECK(name.rfind("prompt_ctx/", 0) != 0);  // generated, never free
    }
    CHECK(task_blocks == e.task_blocks);
    CHECK(class_blocks == e.class_blocks);
  }
}

TEST_CASE("CoOp-MT shares one prompt context across all tasks") {
  const auto inst = toy::make();
  ModelConfig cfg;
  cfg.method = Method::coop_mt;
  const PromptModel model = inst.model(cfg);
  Rng rng(1);
  ParameterSet buffers;
  const ParameterSet p = model.init_parameters(rng, buffers);
  CHECK(p.size() == 1);
  for (std::size_t t = 1; t < model.task_count(); ++t) {
    CHECK(model.task_prompt_context(p, buffers, t) == model.task_prompt_context(p, buffers, 0));
  }
}

TEST_CASE("per-task contexts diverge only where a task had data") {
  const auto inst = toy::make();
  ModelConfig cfg;
  cfg.method = Method::softcpt_nats;
  const PromptModel model = inst.model(cfg);
  Rng rng(1);
  ParameterSet buffers;
  ParameterSet p = model.init_parameters(rng, buffers);
  const ParameterSet before = p;

  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < inst.train.size(); ++i) {
    if (inst.train.task[i] == 1) rows.push_back(i);
  }
  const Batch only_task1 = select_rows(inst.train, rows);
  const LossResult r = model.loss_and_grad(p, buffers, only_task1);
  sgd_step(p, r.grads, 0.1);
  CHECK(p.at(names::task_context(1)) != before.at(names::task_context(1)));
  CHECK(p.at(names::task_context(0)) == before.at(names::task_context(0)));
  CHECK(p.at(names::task_context(2)) == before.at(names::task_context(2)));
}

TEST_CASE("CSTA produces distinct augmented inputs per class") {
  const auto inst = toy::make();
  ModelConfig cfg;
  cfg.method = Method::softcpt_csta;
  const PromptModel model = inst.model(cfg);
  Rng rng(1);
  ParameterSet buffers;
  const ParameterSet p = model.init_parameters(rng, buffers);
  const ClassifierWeights w = model.class_weights(p, buffers, 0);
  for (Eigen::Index i = 0; i < w.rows.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < w.rows.rows(); ++j) {
      CHECK((w.rows.row(i) - w.rows.row(j)).norm() > 1e-6);
    }
  }
  CHECK_THROWS_AS(model.task_prompt_context(p, buffers, 0), ContractError);
}
