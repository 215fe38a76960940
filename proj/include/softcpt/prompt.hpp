#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "softcpt/encoder.hpp"
#include "softcpt/rng.hpp"
#include "softcpt/tensor.hpp"

namespace softcpt {

/// Training method. The six SoftCPT variants are named by class-feature
/// context (N/A, class-agnostic, class-specific) and task context
/// (task-agnostic, task-specific).
enum class Method {
  coop_ca,
  coop_cs,
  coop_mt,
  softcpt_nata,
  softcpt_nats,
  softcpt_cata,
  softcpt_csta,
  softcpt_cats,
  softcpt_csts,
};

const char* to_string(Method m) noexcept;
Method parse_method(std::string_view name);
std::vector<Method> all_methods();
std::vector<Method> softcpt_variants();

constexpr bool is_softcpt(Method m) noexcept {
  return m != Method::coop_ca && m != Method::coop_cs && m != Method::coop_mt;
}
/// C* variants: class features are concatenated to the task feature.
constexpr bool uses_class_features(Method m) noexcept {
  return m == Method::softcpt_cata || m == Method::softcpt_csta || m == Method::softcpt_cats ||
         m == Method::softcpt_csts;
}
/// One class context per class (CS*) rather than a shared one (CA*).
constexpr bool class_specific_class_context(Method m) noexcept {
  return m == Method::softcpt_csta || m == Method::softcpt_csts;
}
constexpr bool task_specific_task_context(Method m) noexcept {
  return m == Method::softcpt_nats || m == Method::softcpt_cats || m == Method::softcpt_csts;
}

enum class ContextOwner { shared, per_owner };

inline constexpr double kContextInitStd = 0.02;

/// i.i.d. N(0, 0.02^2) block, the same initializer for contexts and W.
Matrix init_context(Eigen::Index rows, Eigen::Index cols, Rng& rng);

/// [S]_1..[S]_L followed by the class-name tokens.
TokenSequence build_class_prompt(const Matrix& context, const TokenSequence& class_tokens);

/// [U]_1..[U]_M blocks; a single shared block or one per task.
struct TaskContext {
  ContextOwner owner = ContextOwner::shared;
  std::vector<Matrix> blocks;

  const Matrix& block_for(std::size_t task) const;
};

TokenSequence build_task_prompt(const TaskContext& context, const TokenSequence& task_tokens,
                                std::size_t task);

/// Concatenation task || class (task first), the C* meta-network input.
Vec augment_task_feature(const Vec& task_feature, const Vec& class_feature);

// Parameter names. Global class indices count classes across all tasks.
namespace names {
std::string prompt_context_shared();
std::string prompt_context_task(std::size_t task);
std::string prompt_context_class(std::size_t global_class);
std::string task_context_shared();
std::string task_context(std::size_t task);
std::string class_context_shared();
std::string class_context(std::size_t global_class);
}  // namespace names

}  // namespace softcpt
