#pragma once

// Shared helpers for the unit tests and the acceptance runner: fixture
// lookup, temporary directories, independent metric oracles and the
// synthetic training fixtures.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "triage/classifiers.hpp"
#include "triage/encoders.hpp"
#include "triage/evaluation.hpp"
#include "triage/taxonomy.hpp"
#include "triage/util/rng.hpp"

namespace triage::testing {

std::filesystem::path fixture(const std::string& name);
std::filesystem::path cli_binary();

class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// ---- oracles ------------------------------------------------------------------

/// Kappa from the full k x k contingency table.
double oracle_cohen(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b,
                    std::size_t k);
/// Fleiss kappa from per-item category counts built by brute force.
double oracle_fleiss(const std::vector<std::vector<std::size_t>>& table, std::size_t k);
/// Counts (truth, predicted) pairs one by one; predicted == k means unparseable.
std::vector<std::vector<std::size_t>> oracle_confusion(const std::vector<std::size_t>& truth,
                                                       const std::vector<std::size_t>& predicted,
                                                       std::size_t k);
/// Weighted F1 straight from per-class TP/FP/FN tallies over the pair list.
double oracle_weighted_f1(const std::vector<std::size_t>& truth,
                          const std::vector<std::size_t>& predicted, std::size_t k);

std::vector<ClassId> to_ids(const std::vector<std::size_t>& v);

// ---- training fixtures -----------------------------------------------------------

/// 26 samples (2 per class) whose cached text and image vectors are a class
/// prototype plus small noise.
struct SeparableFixture {
  std::shared_ptr<const FeatureCache> cache;
  std::vector<Sample> samples;
  std::shared_ptr<Encoder> text;
  std::shared_ptr<Encoder> image;
};
SeparableFixture separable_fixture(std::uint64_t seed = 5);

/// Random cached features for `count` posts (ids "g0", "g1", ...).
SeparableFixture random_feature_fixture(std::size_t count, std::uint64_t seed);

/// A two-layer trainable backbone small enough for unit tests.
EncoderConfig tiny_local_config(Modality modality);

double accuracy(const FusionModel& model, const std::vector<Sample>& samples);

struct GradCheck {
  std::size_t checked = 0;
  std::size_t failed = 0;
  double worst_relative = 0.0;
  std::string worst_parameter;
};

/// Five-point central differences against the analytic gradient of the mean
/// cross-entropy on a small batch, with dropout off. An entry passes when
/// the relative error is within `tolerance` or both gradients are below
/// `abs_floor` in magnitude.
GradCheck gradient_check(FusionKind fusion, double tolerance = 1e-4, double abs_floor = 1e-8,
                         std::size_t per_parameter = 6);

/// Flattened copy of every parameter value, for bitwise comparisons.
std::vector<std::vector<double>> parameter_values(const std::vector<nn::Parameter*>& params);

// ---- command-line runs ----------------------------------------------------------

struct CliResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

/// Runs the built command-line tool with `args` (shell-quoted here).
CliResult run_cli(const std::vector<std::string>& args);

/// Writes posts.jsonl, labels.jsonl and features.bin (a feature cache with
/// the default encoder header) for `per_class` separable posts per class,
/// plus config.json: a train config with a small fusion model.
void write_training_corpus(const std::filesystem::path& dir, std::size_t per_class = 8,
                           std::uint64_t seed = 5);

}  // namespace triage::testing
