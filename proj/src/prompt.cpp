#include "softcpt/prompt.hpp"

#include <array>
#include <cstdio>

namespace softcpt {

namespace {

struct MethodName {
  Method method;
  const char* name;
};

constexpr std::array<MethodName, 9> kMethodNames = {{
    {Method::coop_ca, "coop-ca"},
    {Method::coop_cs, "coop-cs"},
    {Method::coop_mt, "coop-mt"},
    {Method::softcpt_nata, "softcpt-nata"},
    {Method::softcpt_nats, "softcpt-nats"},
    {Method::softcpt_cata, "softcpt-cata"},
    {Method::softcpt_csta, "softcpt-csta"},
    {Method::softcpt_cats, "softcpt-cats"},
    {Method::softcpt_csts, "softcpt-csts"},
}};

std::string indexed(const char* prefix, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s/%05zu", prefix, i);
  return buf;
}

}  // namespace

const char* to_string(Method m) noexcept {
  for (const auto& entry : kMethodNames) {
    if (entry.method == m) return entry.name;
  }
  return "unknown";
}

Method parse_method(std::string_view name) {
  for (const auto& entry : kMethodNames) {
    if (name == entry.name) return entry.method;
  }
  throw InvalidArgument("unknown method '" + std::string(name) + "'");
}

std::vector<Method> all_methods() {
  std::vector<Method> out;
  for (const auto& entry : kMethodNames) out.push_back(entry.method);
  return out;
}

std::vector<Method> softcpt_variants() {
  return {Method::softcpt_nata, Method::softcpt_nats, Method::softcpt_cata,
          Method::softcpt_csta, Method::softcpt_cats, Method::softcpt_csts};
}

Matrix init_context(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  if (rows < 0 || cols <= 0) throw InvalidArgument("init_context: non-positive shape");
  return rng.gaussian(rows, cols, kContextInitStd);
}

TokenSequence build_class_prompt(const Matrix& context, const TokenSequence& class_tokens) {
  if (context.rows() > 0 && context.cols() != class_tokens.cols()) {
    throw ShapeError("build_class_prompt: context width " + std::to_string(context.cols()) +
                     " vs token width " + std::to_string(class_tokens.cols()));
  }
  return vconcat(context, class_tokens);
}

const Matrix& TaskContext::block_for(std::size_t task) const {
  if (blocks.empty()) throw InvalidArgument("task context has no blocks");
  if (owner == ContextOwner::shared) return blocks.front();
  if (task >= blocks.size()) {
    throw InvalidArgument("task index " + std::to_string(task) + " out of range (" +
                          std::to_string(blocks.size()) + " task contexts)");
  }
  return blocks[task];
}

TokenSequence build_task_prompt(const TaskContext& context, const TokenSequence& task_tokens,
                                std::size_t task) {
  const Matrix& block = context.block_for(task);
  if (block.rows() > 0 && block.cols() != task_tokens.cols()) {
    throw ShapeError("build_task_prompt: context width " + std::to_string(block.cols()) +
                     " vs token width " + std::to_string(task_tokens.cols()));
  }
  return vconcat(block, task_tokens);
}

Vec augment_task_feature(const Vec& task_feature, const Vec& class_feature) {
  if (task_feature.size() != class_feature.size()) {
    throw ShapeError("augment_task_feature: widths " + std::to_string(task_feature.size()) +
                     " and " + std::to_string(class_feature.size()));
  }
  Vec out(task_feature.size() * 2);
  out << task_feature, class_feature;
  return out;
}

namespace names {
std::string prompt_context_shared() { return "prompt_ctx/shared"; }
std::string prompt_context_task(std::size_t task) { return indexed("prompt_ctx/task", task); }
std::string prompt_context_class(std::size_t c) { return indexed("prompt_ctx/class", c); }
std::string task_context_shared() { return "task_ctx/shared"; }
std::string task_context(std::size_t task) { return indexed("task_ctx/task", task); }
std::string class_context_shared() { return "class_ctx/shared"; }
std::string class_context(std::size_t c) { return indexed("class_ctx/class", c); }
}  // namespace names

}  // namespace softcpt
