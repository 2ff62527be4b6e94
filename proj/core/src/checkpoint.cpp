#include "shield/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <string>

#include <json.hpp>

#include "shield/errors.hpp"
#include "shield/rng.hpp"

namespace shield {

namespace {

using nlohmann::json;

json tensor_to_json(const Tensor& t) {
  return json{{"shape", t.shape}, {"values", t.values}};
}

Tensor tensor_from_json(const json& j, const std::string& what) {
  try {
    Tensor t(j.at("shape").get<std::vector<size_t>>(),
             j.at("values").get<std::vector<double>>());
    return t;
  } catch (const json::exception& e) {
    throw ConfigError("checkpoint: bad tensor for " + what + ": " + e.what());
  } catch (const ShapeError& e) {
    throw ConfigError("checkpoint: bad tensor for " + what + ": " + e.what());
  }
}

std::string hash_str(uint64_t h) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

uint64_t hash_from_str(const std::string& s) {
  try {
    return std::stoull(s, nullptr, 16);
  } catch (const std::exception&) {
    throw ConfigError("checkpoint: malformed digest '" + s + "'");
  }
}

json read_json_file(const std::string& path, const std::string& expected_kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("checkpoint " + path + ": " + e.what());
  }
  if (!j.is_object() || j.value("kind", "") != expected_kind)
    throw ConfigError("checkpoint " + path + ": not a " + expected_kind + " file");
  return j;
}

void write_json_file(const json& j, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump();
  out << '\n';
  if (!out) throw IoError("short write to " + path);
}

}  // namespace

std::string noise_name(NoiseMode mode) {
  switch (mode) {
    case NoiseMode::Fresh: return "fresh";
    case NoiseMode::InputSeeded: return "input-seeded";
    case NoiseMode::Zero: break;
  }
  return "zero";
}

NoiseMode noise_from_name(const std::string& name) {
  if (name == "fresh") return NoiseMode::Fresh;
  if (name == "input-seeded") return NoiseMode::InputSeeded;
  if (name == "zero") return NoiseMode::Zero;
  throw ConfigError("unknown noise mode '" + name +
                    "' (expected fresh, input-seeded, or zero)");
}

std::string variant_name(ShieldVariant variant) {
  switch (variant) {
    case ShieldVariant::Full: return "full";
    case ShieldVariant::SeOnly: return "se-only";
    case ShieldVariant::MeOnly: break;
  }
  return "me-only";
}

ShieldVariant variant_from_name(const std::string& name) {
  if (name == "full") return ShieldVariant::Full;
  if (name == "se-only") return ShieldVariant::SeOnly;
  if (name == "me-only") return ShieldVariant::MeOnly;
  throw ConfigError("unknown variant '" + name +
                    "' (expected full, se-only, or me-only)");
}

std::string encoder_name(EncoderKind kind) {
  return kind == EncoderKind::MeanPool ? "meanpool" : "conv";
}

EncoderKind encoder_from_name(const std::string& name) {
  if (name == "meanpool") return EncoderKind::MeanPool;
  if (name == "conv") return EncoderKind::Conv;
  throw ConfigError("unknown encoder '" + name + "' (expected meanpool or conv)");
}

void save_base(const BaseModel& model, const std::string& path) {
  json j;
  j["kind"] = "base-classifier";
  j["format_version"] = 1;
  j["encoder"] = encoder_name(model.encoder);
  j["embed_dim"] = model.embed_dim;
  j["feature_dim"] = model.feature_dim;
  j["num_classes"] = model.num_classes;
  j["conv_filters"] = model.conv_filters;
  j["frozen"] = model.frozen;
  j["vocab"] = model.vocab.tokens();
  json tensors;
  tensors["embedding"] = tensor_to_json(model.embedding);
  if (model.encoder == EncoderKind::MeanPool) {
    tensors["enc_w"] = tensor_to_json(model.enc_w);
    tensors["enc_b"] = tensor_to_json(model.enc_b);
  } else {
    for (size_t k = 0; k < model.conv_w.size(); ++k) {
      tensors["conv_w" + std::to_string(k)] = tensor_to_json(model.conv_w[k]);
      tensors["conv_b" + std::to_string(k)] = tensor_to_json(model.conv_b[k]);
    }
  }
  tensors["head_w"] = tensor_to_json(model.head_w);
  tensors["head_b"] = tensor_to_json(model.head_b);
  j["tensors"] = std::move(tensors);
  j["param_hash"] = hash_str(model.param_hash());
  write_json_file(j, path);
}

BaseModel load_base(const std::string& path) {
  json j = read_json_file(path, "base-classifier");
  BaseModel m;
  try {
    m.encoder = encoder_from_name(j.at("encoder").get<std::string>());
    m.embed_dim = j.at("embed_dim").get<size_t>();
    m.feature_dim = j.at("feature_dim").get<size_t>();
    m.num_classes = j.at("num_classes").get<size_t>();
    m.conv_filters = j.at("conv_filters").get<size_t>();
    m.frozen = j.at("frozen").get<bool>();
    const auto tokens = j.at("vocab").get<std::vector<std::string>>();
    if (tokens.size() < 2 || tokens[0] != "<pad>" || tokens[1] != "<unk>")
      throw ConfigError("checkpoint " + path + ": vocabulary lost its reserved tokens");
    for (size_t i = 2; i < tokens.size(); ++i) m.vocab.add(tokens[i]);
    const json& tensors = j.at("tensors");
    m.embedding = tensor_from_json(tensors.at("embedding"), "embedding");
    if (m.encoder == EncoderKind::MeanPool) {
      m.enc_w = tensor_from_json(tensors.at("enc_w"), "enc_w");
      m.enc_b = tensor_from_json(tensors.at("enc_b"), "enc_b");
    } else {
      for (size_t k = 0; k < 3; ++k) {
        m.conv_w.push_back(
            tensor_from_json(tensors.at("conv_w" + std::to_string(k)), "conv_w"));
        m.conv_b.push_back(
            tensor_from_json(tensors.at("conv_b" + std::to_string(k)), "conv_b"));
      }
    }
    m.head_w = tensor_from_json(tensors.at("head_w"), "head_w");
    m.head_b = tensor_from_json(tensors.at("head_b"), "head_b");
    const uint64_t stored = hash_from_str(j.at("param_hash").get<std::string>());
    if (m.param_hash() != stored)
      throw ConfigError("checkpoint " + path + ": parameter digest mismatch");
  } catch (const json::exception& e) {
    throw ConfigError("checkpoint " + path + ": " + e.what());
  }
  return m;
}

void save_shield(const ShieldModel& model, const std::string& path) {
  if (model.base == nullptr) throw ConfigError("checkpoint: shield model has no base");
  json j;
  j["kind"] = "shield-patch";
  j["format_version"] = 1;
  j["base_hash"] = hash_str(model.base->param_hash());
  json cfg;
  cfg["num_heads"] = model.config.num_heads;
  cfg["num_candidates"] = model.config.num_candidates;
  cfg["gamma"] = model.config.gamma;
  cfg["tau_train"] = model.config.tau_train;
  cfg["tau_infer"] = model.config.tau_infer;
  cfg["hidden"] = model.config.hidden;
  cfg["noise"] = noise_name(model.config.noise);
  cfg["variant"] = variant_name(model.config.variant);
  cfg["seed"] = hash_str(model.config.seed);
  j["config"] = std::move(cfg);
  j["discretized"] = model.discretized;
  j["active"] = model.active;
  j["beta"] = tensor_to_json(model.bank.beta);
  j["gate"] = json{{"w", tensor_to_json(model.gate.w)}, {"b", tensor_to_json(model.gate.b)}};
  json heads = json::array();
  for (const auto& head : model.bank.heads) {
    json hj = json::array();
    for (const Candidate& cand : head) {
      json cj;
      cj["hidden_layers"] = cand.hidden_layers;
      json ws = json::array(), bs = json::array();
      for (const Tensor& t : cand.weights) ws.push_back(tensor_to_json(t));
      for (const Tensor& t : cand.biases) bs.push_back(tensor_to_json(t));
      cj["weights"] = std::move(ws);
      cj["biases"] = std::move(bs);
      hj.push_back(std::move(cj));
    }
    heads.push_back(std::move(hj));
  }
  j["heads"] = std::move(heads);
  j["patch_hash"] = hash_str(model.patch_param_hash());
  write_json_file(j, path);
}

ShieldModel load_shield(const std::string& path, const BaseModel& base) {
  json j = read_json_file(path, "shield-patch");
  ShieldModel m;
  m.base = &base;
  try {
    const uint64_t want = hash_from_str(j.at("base_hash").get<std::string>());
    if (base.param_hash() != want)
      throw ConfigError("checkpoint " + path +
                        ": patch was trained on a different base model");
    const json& cfg = j.at("config");
    m.config.num_heads = cfg.at("num_heads").get<size_t>();
    m.config.num_candidates = cfg.at("num_candidates").get<size_t>();
    m.config.gamma = cfg.at("gamma").get<double>();
    m.config.tau_train = cfg.at("tau_train").get<double>();
    m.config.tau_infer = cfg.at("tau_infer").get<double>();
    m.config.hidden = cfg.at("hidden").get<size_t>();
    m.config.noise = noise_from_name(cfg.at("noise").get<std::string>());
    m.config.variant = variant_from_name(cfg.at("variant").get<std::string>());
    m.config.seed = hash_from_str(cfg.at("seed").get<std::string>());
    m.discretized = j.at("discretized").get<bool>();
    m.active = j.at("active").get<std::vector<size_t>>();
    m.bank.beta = tensor_from_json(j.at("beta"), "beta");
    m.gate.w = tensor_from_json(j.at("gate").at("w"), "gate.w");
    m.gate.b = tensor_from_json(j.at("gate").at("b"), "gate.b");
    for (const json& hj : j.at("heads")) {
      std::vector<Candidate> head;
      for (const json& cj : hj) {
        Candidate cand;
        cand.hidden_layers = cj.at("hidden_layers").get<size_t>();
        for (const json& t : cj.at("weights"))
          cand.weights.push_back(tensor_from_json(t, "candidate weight"));
        for (const json& t : cj.at("biases"))
          cand.biases.push_back(tensor_from_json(t, "candidate bias"));
        head.push_back(std::move(cand));
      }
      m.bank.heads.push_back(std::move(head));
    }
    const uint64_t stored = hash_from_str(j.at("patch_hash").get<std::string>());
    if (m.patch_param_hash() != stored)
      throw ConfigError("checkpoint " + path + ": parameter digest mismatch");
  } catch (const json::exception& e) {
    throw ConfigError("checkpoint " + path + ": " + e.what());
  }
  if (m.bank.heads.size() != m.config.num_heads ||
      (m.discretized && m.active.size() != m.config.num_heads))
    throw ConfigError("checkpoint " + path + ": head count does not match config");
  return m;
}

}  // namespace shield
