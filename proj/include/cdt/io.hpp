#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cdt/model.hpp"

namespace cdt {

// ---- weight container -----------------------------------------------------
//
// Layout, all integers little-endian:
//   4 bytes   magic "CDT1"
//   4 bytes   uint32 header length H
//   H bytes   UTF-8 JSON {"config": {...}, "tensors": [{"name", "shape", "offset", "len"}]}
//   payload   raw float32 data; offset/len are byte counts relative to the
//             start of the payload
//
// Attention weights are stored stacked over heads: W_Q/W_K/W_V as
// [n_heads x d_model x d_head], W_O as [n_heads x d_head x d_model],
// b_Q/b_K/b_V as [n_heads x d_head].

inline constexpr char kContainerMagic[4] = {'C', 'D', 'T', '1'};

std::vector<char> serialize_model(const Model& model);
Model deserialize_model(std::span<const char> bytes);

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

// Expected tensor names and shapes for a config, in container order.
std::vector<std::pair<std::string, Shape>> container_layout(const ModelConfig& config);

// ---- token sequence files -------------------------------------------------

// One record of a newline-delimited JSON dataset.
struct Sample {
  std::vector<int> tokens;
  std::map<std::string, int> label_positions;
  std::vector<int> answer_tokens;
  std::vector<int> wrong_tokens;

  // Throws InputError when the label is missing.
  int position(const std::string& label) const;
  friend bool operator==(const Sample&, const Sample&) = default;
};

std::string sample_to_json_line(const Sample& s);
Sample sample_from_json_line(const std::string& line);

std::vector<Sample> read_samples(const std::filesystem::path& path);
void write_samples(const std::filesystem::path& path, std::span<const Sample> samples);

std::vector<std::vector<int>> token_lists(std::span<const Sample> samples);

// ---- golden logits --------------------------------------------------------
//
// Reference logits recorded next to an exported container:
//   {"prompts": [{"tokens": [...], "logits": [[...], ...]}]}
// with one logits row per token.

struct GoldenPrompt {
  std::vector<int> tokens;
  Tensor logits;  // [seq x vocab]
};

std::vector<GoldenPrompt> read_golden_logits(const std::filesystem::path& path);
void write_golden_logits(const std::filesystem::path& path, std::span<const GoldenPrompt> prompts);

// FNV-1a over a file's bytes, as 16 hex digits. Used to fingerprint models
// in run manifests.
std::string file_fingerprint(const std::filesystem::path& path);

}  // namespace cdt
