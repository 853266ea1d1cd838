#include "cdt/io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cdt/error.hpp"

namespace cdt {

namespace {

using ordered_json = nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little, "weight container I/O assumes a little-endian host");

Tensor stack_heads(const LayerWeights& lw, Tensor HeadWeights::*member) {
  Shape s = (lw.heads.front().*member).shape();
  const std::size_t per = shape_numel(s);
  std::vector<float> data;
  data.reserve(per * lw.heads.size());
  for (const auto& hw : lw.heads) {
    auto span = (hw.*member).data();
    data.insert(data.end(), span.begin(), span.end());
  }
  s.insert(s.begin(), lw.heads.size());
  return Tensor(std::move(s), std::move(data));
}

void unstack_heads(const Tensor& stacked, std::vector<HeadWeights>& heads, Tensor HeadWeights::*member) {
  Shape s(stacked.shape().begin() + 1, stacked.shape().end());
  const std::size_t per = shape_numel(s);
  for (std::size_t h = 0; h < heads.size(); ++h) {
    auto src = stacked.data().subspan(h * per, per);
    heads[h].*member = Tensor(s, std::vector<float>(src.begin(), src.end()));
  }
}

// Tensors of a model, keyed by container name, in container order.
std::vector<std::pair<std::string, Tensor>> named_tensors(const Model& model) {
  const auto& c = model.config();
  const auto& w = model.weights();
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embed.W_E", w.W_E);
  out.emplace_back("pos.W_pos", w.W_pos);
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& lw = model.layer(l);
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.emplace_back(p + "ln1.w", lw.ln1_w);
    out.emplace_back(p + "ln1.b", lw.ln1_b);
    out.emplace_back(p + "attn.W_Q", stack_heads(lw, &HeadWeights::W_Q));
    out.emplace_back(p + "attn.W_K", stack_heads(lw, &HeadWeights::W_K));
    out.emplace_back(p + "attn.W_V", stack_heads(lw, &HeadWeights::W_V));
    out.emplace_back(p + "attn.W_O", stack_heads(lw, &HeadWeights::W_O));
    out.emplace_back(p + "attn.b_Q", stack_heads(lw, &HeadWeights::b_Q));
    out.emplace_back(p + "attn.b_K", stack_heads(lw, &HeadWeights::b_K));
    out.emplace_back(p + "attn.b_V", stack_heads(lw, &HeadWeights::b_V));
    out.emplace_back(p + "attn.b_O", lw.b_O);
    if (c.has_mlp()) {
      out.emplace_back(p + "ln2.w", lw.ln2_w);
      out.emplace_back(p + "ln2.b", lw.ln2_b);
      out.emplace_back(p + "mlp.W_in", lw.W_in);
      out.emplace_back(p + "mlp.b_in", lw.b_in);
      out.emplace_back(p + "mlp.W_out", lw.W_out);
      out.emplace_back(p + "mlp.b_out", lw.b_out);
    }
  }
  if (c.has_final_ln) {
    out.emplace_back("ln_final.w", w.ln_final_w);
    out.emplace_back("ln_final.b", w.ln_final_b);
  }
  out.emplace_back("unembed.W_U", w.W_U);
  return out;
}

ordered_json config_to_json(const ModelConfig& c) {
  ordered_json j;
  j["arch"] = to_string(c.arch);
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["d_model"] = c.d_model;
  j["d_head"] = c.d_head;
  j["d_mlp"] = c.d_mlp;
  j["vocab_size"] = c.vocab_size;
  j["max_seq"] = c.max_seq;
  j["ln_eps"] = c.ln_eps;
  j["has_final_ln"] = c.has_final_ln;
  j["positional"] = c.positional;
  return j;
}

ModelConfig config_from_json(const ordered_json& j) {
  ModelConfig c;
  try {
    c.arch = parse_arch(j.at("arch").get<std::string>());
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_head = j.at("d_head").get<int>();
    c.d_mlp = j.at("d_mlp").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq = j.at("max_seq").get<int>();
    c.ln_eps = j.at("ln_eps").get<float>();
    c.has_final_ln = j.at("has_final_ln").get<bool>();
    c.positional = j.value("positional", std::string("learned-absolute"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad config in container header: ") + e.what());
  } catch (const InputError& e) {
    throw FormatError(std::string("bad config in container header: ") + e.what());
  }
  try {
    c.validate();
  } catch (const InputError& e) {
    throw FormatError(e.what());
  }
  return c;
}

std::uint32_t read_u32(const char* p) {
  std::uint32_t v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

}  // namespace

std::vector<std::pair<std::string, Shape>> container_layout(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto dh = static_cast<std::size_t>(c.d_head);
  const auto H = static_cast<std::size_t>(c.n_heads);
  const auto dm = static_cast<std::size_t>(c.d_mlp);
  const auto V = static_cast<std::size_t>(c.vocab_size);
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("embed.W_E", Shape{V, d});
  out.emplace_back("pos.W_pos", Shape{static_cast<std::size_t>(c.max_seq), d});
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.emplace_back(p + "ln1.w", Shape{d});
    out.emplace_back(p + "ln1.b", Shape{d});
    out.emplace_back(p + "attn.W_Q", Shape{H, d, dh});
    out.emplace_back(p + "attn.W_K", Shape{H, d, dh});
    out.emplace_back(p + "attn.W_V", Shape{H, d, dh});
    out.emplace_back(p + "attn.W_O", Shape{H, dh, d});
    out.emplace_back(p + "attn.b_Q", Shape{H, dh});
    out.emplace_back(p + "attn.b_K", Shape{H, dh});
    out.emplace_back(p + "attn.b_V", Shape{H, dh});
    out.emplace_back(p + "attn.b_O", Shape{d});
    if (c.has_mlp()) {
      out.emplace_back(p + "ln2.w", Shape{d});
      out.emplace_back(p + "ln2.b", Shape{d});
      out.emplace_back(p + "mlp.W_in", Shape{d, dm});
      out.emplace_back(p + "mlp.b_in", Shape{dm});
      out.emplace_back(p + "mlp.W_out", Shape{dm, d});
      out.emplace_back(p + "mlp.b_out", Shape{d});
    }
  }
  if (c.has_final_ln) {
    out.emplace_back("ln_final.w", Shape{d});
    out.emplace_back("ln_final.b", Shape{d});
  }
  out.emplace_back("unembed.W_U", Shape{d, V});
  return out;
}

std::vector<char> serialize_model(const Model& model) {
  const auto tensors = named_tensors(model);
  ordered_json header;
  header["config"] = config_to_json(model.config());
  header["tensors"] = ordered_json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const std::size_t len = t.size() * sizeof(float);
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"len", len}});
    offset += len;
  }
  const std::string text = header.dump();
  std::vector<char> out;
  out.reserve(8 + text.size() + offset);
  out.insert(out.end(), std::begin(kContainerMagic), std::end(kContainerMagic));
  const auto hlen = static_cast<std::uint32_t>(text.size());
  const char* hp = reinterpret_cast<const char*>(&hlen);
  out.insert(out.end(), hp, hp + 4);
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, t] : tensors) {
    const char* p = reinterpret_cast<const char*>(t.data().data());
    out.insert(out.end(), p, p + t.size() * sizeof(float));
  }
  return out;
}

Model deserialize_model(std::span<const char> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kContainerMagic, 4) != 0) {
    throw FormatError("bad magic bytes: not a CDT1 weight container");
  }
  const std::uint32_t hlen = read_u32(bytes.data() + 4);
  if (8 + static_cast<std::size_t>(hlen) > bytes.size()) throw FormatError("truncated container header");
  ordered_json header;
  try {
    header = ordered_json::parse(bytes.begin() + 8, bytes.begin() + 8 + hlen);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("container header is not valid JSON: ") + e.what());
  }
  if (!header.contains("config") || !header.contains("tensors")) {
    throw FormatError("container header lacks config or tensors");
  }
  const ModelConfig config = config_from_json(header["config"]);
  const auto payload = bytes.subspan(8 + hlen);

  std::map<std::string, Tensor> found;
  for (const auto& entry : header["tensors"]) {
    std::string name;
    Shape shape;
    std::size_t offset = 0, len = 0;
    try {
      name = entry.at("name").get<std::string>();
      shape = entry.at("shape").get<Shape>();
      offset = entry.at("offset").get<std::size_t>();
      len = entry.at("len").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("bad tensor entry in container header: ") + e.what());
    }
    if (len != shape_numel(shape) * sizeof(float)) {
      throw FormatError("tensor " + name + ": len " + std::to_string(len) + " does not match shape " +
                        shape_to_string(shape));
    }
    if (offset > payload.size() || len > payload.size() - offset) {
      throw FormatError("tensor " + name + " extends past the end of the payload");
    }
    std::vector<float> data(shape_numel(shape));
    std::memcpy(data.data(), payload.data() + offset, len);
    if (!found.emplace(name, Tensor(std::move(shape), std::move(data))).second) {
      throw FormatError("duplicate tensor " + name);
    }
  }

  std::set<std::string> expected;
  for (const auto& [name, shape] : container_layout(config)) {
    expected.insert(name);
    auto it = found.find(name);
    if (it == found.end()) throw FormatError("missing tensor " + name);
    if (it->second.shape() != shape) {
      throw FormatError("shape mismatch for " + name + ": expected " + shape_to_string(shape) + ", got " +
                        shape_to_string(it->second.shape()));
    }
  }
  for (const auto& [name, t] : found) {
    if (!expected.contains(name)) throw FormatError("unexpected tensor " + name);
  }

  ModelWeights w;
  w.W_E = found["embed.W_E"];
  w.W_pos = found["pos.W_pos"];
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    LayerWeights lw;
    lw.ln1_w = found[p + "ln1.w"];
    lw.ln1_b = found[p + "ln1.b"];
    lw.heads.resize(static_cast<std::size_t>(config.n_heads));
    unstack_heads(found[p + "attn.W_Q"], lw.heads, &HeadWeights::W_Q);
    unstack_heads(found[p + "attn.W_K"], lw.heads, &HeadWeights::W_K);
    unstack_heads(found[p + "attn.W_V"], lw.heads, &HeadWeights::W_V);
    unstack_heads(found[p + "attn.W_O"], lw.heads, &HeadWeights::W_O);
    unstack_heads(found[p + "attn.b_Q"], lw.heads, &HeadWeights::b_Q);
    unstack_heads(found[p + "attn.b_K"], lw.heads, &HeadWeights::b_K);
    unstack_heads(found[p + "attn.b_V"], lw.heads, &HeadWeights::b_V);
    lw.b_O = found[p + "attn.b_O"];
    if (config.has_mlp()) {
      lw.ln2_w = found[p + "ln2.w"];
      lw.ln2_b = found[p + "ln2.b"];
      lw.W_in = found[p + "mlp.W_in"];
      lw.b_in = found[p + "mlp.b_in"];
      lw.W_out = found[p + "mlp.W_out"];
      lw.b_out = found[p + "mlp.b_out"];
    }
    w.blocks.push_back(std::move(lw));
  }
  if (config.has_final_ln) {
    w.ln_final_w = found["ln_final.w"];
    w.ln_final_b = found["ln_final.b"];
  }
  w.W_U = found["unembed.W_U"];
  return Model(config, std::move(w));
}

void save_model(const Model& model, const std::filesystem::path& path) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing " + path.string());
}

namespace {

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

Model load_model(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return deserialize_model(bytes);
}

int Sample::position(const std::string& label) const {
  auto it = label_positions.find(label);
  if (it == label_positions.end()) throw InputError("sample has no '" + label + "' position");
  return it->second;
}

std::string sample_to_json_line(const Sample& s) {
  ordered_json j;
  j["tokens"] = s.tokens;
  j["label_positions"] = ordered_json::object();
  for (const auto& [k, v] : s.label_positions) j["label_positions"][k] = v;
  j["answer_tokens"] = s.answer_tokens;
  j["wrong_tokens"] = s.wrong_tokens;
  return j.dump();
}

Sample sample_from_json_line(const std::string& line) {
  try {
    const auto j = ordered_json::parse(line);
    Sample s;
    s.tokens = j.at("tokens").get<std::vector<int>>();
    for (const auto& [k, v] : j.at("label_positions").items()) s.label_positions[k] = v.get<int>();
    s.answer_tokens = j.at("answer_tokens").get<std::vector<int>>();
    s.wrong_tokens = j.at("wrong_tokens").get<std::vector<int>>();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad token sequence record: ") + e.what());
  }
}

std::vector<Sample> read_samples(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<Sample> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(sample_from_json_line(line));
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_samples(const std::filesystem::path& path, std::span<const Sample> samples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");
  for (const auto& s : samples) out << sample_to_json_line(s) << '\n';
}

std::vector<std::vector<int>> token_lists(std::span<const Sample> samples) {
  std::vector<std::vector<int>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.tokens);
  return out;
}

std::vector<GoldenPrompt> read_golden_logits(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<GoldenPrompt> out;
  try {
    const auto j = ordered_json::parse(in);
    for (const auto& p : j.at("prompts")) {
      GoldenPrompt g;
      g.tokens = p.at("tokens").get<std::vector<int>>();
      const auto rows = p.at("logits").get<std::vector<std::vector<float>>>();
      if (rows.size() != g.tokens.size()) throw FormatError("golden prompt has " + std::to_string(rows.size()) +
                                                            " logits rows for " + std::to_string(g.tokens.size()) + " tokens");
      const std::size_t V = rows.empty() ? 0 : rows.front().size();
      std::vector<float> data;
      for (const auto& r : rows) {
        if (r.size() != V) throw FormatError("golden logits rows have unequal lengths");
        data.insert(data.end(), r.begin(), r.end());
      }
      g.logits = Tensor(Shape{rows.size(), V}, std::move(data));
      out.push_back(std::move(g));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad golden logits file: " + e.what());
  }
  return out;
}

void write_golden_logits(const std::filesystem::path& path, std::span<const GoldenPrompt> prompts) {
  ordered_json j;
  j["prompts"] = ordered_json::array();
  for (const auto& g : prompts) {
    ordered_json rows = ordered_json::array();
    for (std::size_t r = 0; r < g.logits.rows(); ++r) {
      auto row = g.logits.row(r);
      rows.push_back(std::vector<float>(row.begin(), row.end()));
    }
    j["prompts"].push_back({{"tokens", g.tokens}, {"logits", rows}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");
  out << j.dump() << '\n';
}

std::string file_fingerprint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace cdt
