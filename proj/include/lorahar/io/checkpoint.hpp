#pragma once

#include <optional>
#include <string>

#include "lorahar/data/dataset.hpp"
#include "lorahar/finetune/head.hpp"
#include "lorahar/io/container.hpp"

namespace lorahar {

inline json to_json(const ModelConfig& c) {
  return json{{"window_len", c.window_len},   {"channels", c.channels},         {"patch_len", c.patch_len},
              {"embed_dim", c.embed_dim},     {"ffn_hidden", c.ffn_hidden},     {"n_heads", c.n_heads},
              {"n_enc_layers", c.n_enc_layers}, {"n_dec_layers", c.n_dec_layers}, {"mask_ratio", c.mask_ratio},
              {"n_classes", c.n_classes},     {"head_hidden", c.head_hidden},   {"head_dropout", c.head_dropout},
              {"ln_eps", c.ln_eps}};
}

/// Keys missing from `j` keep the values already in `c`.
inline void update_from_json(ModelConfig& c, const json& j) {
  auto take = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  take("window_len", c.window_len);
  take("channels", c.channels);
  take("patch_len", c.patch_len);
  take("embed_dim", c.embed_dim);
  take("ffn_hidden", c.ffn_hidden);
  take("n_heads", c.n_heads);
  take("n_enc_layers", c.n_enc_layers);
  take("n_dec_layers", c.n_dec_layers);
  take("mask_ratio", c.mask_ratio);
  take("n_classes", c.n_classes);
  take("head_hidden", c.head_hidden);
  take("head_dropout", c.head_dropout);
  take("ln_eps", c.ln_eps);
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  update_from_json(c, j);
  c.validate();
  return c;
}

inline json to_json(const LoraConfig& c) {
  json targets = json::array();
  for (LoraTarget t : c.targets) targets.push_back(to_string(t));
  return json{{"rank", c.rank}, {"alpha", c.alpha}, {"targets", targets}, {"init", to_string(c.init)}};
}

inline LoraConfig lora_config_from_json(const json& j) {
  LoraConfig c;
  if (j.contains("rank")) c.rank = j.at("rank").get<std::size_t>();
  if (j.contains("alpha")) c.alpha = j.at("alpha").get<double>();
  if (j.contains("init")) c.init = lora_init_from_string(j.at("init").get<std::string>());
  if (j.contains("targets")) {
    c.targets.clear();
    for (const auto& t : j.at("targets")) c.targets.insert(lora_target_from_string(t.get<std::string>()));
  }
  c.validate();
  return c;
}

/// Visit every stored base tensor of a backbone (adapters excluded): f(parameter, quantized-or-null).
template <typename F>
void for_each_base_tensor(Backbone& b, F&& f) {
  f(b.patch_weight, static_cast<const QuantizedMatrix*>(nullptr));
  f(b.patch_bias, static_cast<const QuantizedMatrix*>(nullptr));
  for (auto& blk : b.blocks) {
    auto proj = [&](Projection& p) { f(p.weight, p.quantized ? &*p.quantized : nullptr); };
    f(blk.ln1_gain, nullptr);
    f(blk.ln1_bias, nullptr);
    proj(blk.q);
    proj(blk.k);
    proj(blk.v);
    proj(blk.o);
    f(blk.ln2_gain, nullptr);
    f(blk.ln2_bias, nullptr);
    proj(blk.ffn1);
    f(blk.ffn1_bias, nullptr);
    proj(blk.ffn2);
    f(blk.ffn2_bias, nullptr);
  }
}

/// Backbone weights only. Quantized projections are stored in NF4 form, so a QLoRA
/// backbone checkpoint holds exactly what the frozen model keeps in memory.
inline std::string serialize_backbone(Backbone& b) {
  ContainerWriter w("backbone");
  w.meta()["config"] = to_json(b.config);
  w.meta()["quantized"] = b.quantized;
  for_each_base_tensor(b, [&](Parameter& p, const QuantizedMatrix* q) {
    if (q != nullptr) w.add_nf4(p.name, *q);
    else w.add_dense(p.name, p.value, p.precision);
  });
  return w.bytes();
}

inline Backbone load_backbone(const std::string& bytes) {
  ContainerReader r(bytes);
  if (r.kind() != "backbone") throw DataError("expected a backbone checkpoint, found '" + r.kind() + "'");
  const ModelConfig cfg = model_config_from_json(r.meta().at("config"));
  Rng scratch(0);
  Backbone b = Backbone::create(cfg, scratch);
  std::size_t seen = 0;
  for_each_base_tensor(b, [&](Parameter& p, const QuantizedMatrix*) {
    ++seen;
    if (r.entry(p.name).at("encoding") == "nf4") {
      p.value = Matrix();
      p.grad = Matrix();
      p.precision = PrecisionClass::QuantizedNf4;
      b.quantized = true;
      return;
    }
    Matrix v = r.dense(p.name);
    if (!v.same_shape(p.value)) throw DataError("tensor '" + p.name + "' has shape " + v.shape_string() + ", expected " + p.value.shape_string());
    p.value = std::move(v);
    p.grad = Matrix(p.value.rows(), p.value.cols());
    p.precision = r.precision(p.name);
  });
  for (auto& blk : b.blocks) {
    blk.for_each_projection([&](LoraTarget, Projection& p) {
      if (p.weight.precision != PrecisionClass::QuantizedNf4) return;
      QuantizedMatrix q = r.nf4(p.weight.name);
      if (q.rows != p.d_in || q.cols != p.d_out) throw DataError("quantized tensor '" + p.weight.name + "' has the wrong shape");
      p.quantized = std::move(q);
    });
  }
  if (seen != r.meta().at("tensors").size()) throw DataError("backbone checkpoint holds unexpected tensors");
  return b;
}

/// Adapter factors of a wrapped backbone, separate from the backbone itself.
inline std::string serialize_adapters(Backbone& b) {
  if (!b.wrapped) throw ConfigError("backbone carries no adapters");
  ContainerWriter w("adapters");
  json list = json::array();
  std::optional<LoraAdapter*> first;
  for (std::size_t i = 0; i < b.blocks.size(); ++i) {
    b.blocks[i].for_each_projection([&](LoraTarget t, Projection& p) {
      if (!p.adapter) return;
      if (!first) first = &*p.adapter;
      list.push_back(json{{"block", i}, {"target", to_string(t)}, {"id", p.adapter->target_id}});
      w.add_dense(p.adapter->a.name, p.adapter->a.value);
      w.add_dense(p.adapter->b.name, p.adapter->b.value);
    });
  }
  if (!first) throw ConfigError("backbone carries no adapters");
  w.meta()["adapters"] = list;
  w.meta()["rank"] = (*first)->rank;
  w.meta()["alpha"] = (*first)->alpha;
  w.meta()["init"] = to_string((*first)->init);
  w.meta()["base_quantized"] = b.quantized;
  return w.bytes();
}

/// Attach stored adapters to an unwrapped backbone and freeze its base weights.
inline void load_adapters(Backbone& b, const std::string& bytes) {
  if (b.wrapped) throw ConfigError("backbone already carries adapters");
  ContainerReader r(bytes);
  if (r.kind() != "adapters") throw DataError("expected an adapter file, found '" + r.kind() + "'");
  const auto rank = r.meta().at("rank").get<std::size_t>();
  const auto alpha = r.meta().at("alpha").get<double>();
  const LoraInit init = lora_init_from_string(r.meta().at("init").get<std::string>());
  b.for_each_parameter([](Parameter& p) { p.trainable = false; });
  for (const auto& e : r.meta().at("adapters")) {
    const auto block = e.at("block").get<std::size_t>();
    if (block >= b.blocks.size()) throw DataError("adapter refers to block " + std::to_string(block) + " that does not exist");
    Projection& p = b.blocks[block].projection(lora_target_from_string(e.at("target").get<std::string>()));
    LoraAdapter ad;
    ad.rank = rank;
    ad.alpha = alpha;
    ad.init = init;
    ad.target_id = e.at("id").get<std::string>();
    ad.a = Parameter(ad.target_id + ".lora_a", r.dense(ad.target_id + ".lora_a"));
    ad.b = Parameter(ad.target_id + ".lora_b", r.dense(ad.target_id + ".lora_b"));
    if (ad.a.value.rows() != rank || ad.b.value.cols() != rank || ad.d_in() != p.d_in || ad.d_out() != p.d_out) {
      throw DataError("adapter '" + ad.target_id + "' does not fit its projection");
    }
    p.adapter = std::move(ad);
  }
  b.wrapped = true;
}

inline std::string serialize_head(ClassifierHead& h) {
  ContainerWriter w("head");
  w.meta()["dropout"] = h.dropout;
  w.meta()["momentum"] = h.momentum;
  w.meta()["eps"] = h.eps;
  w.meta()["layer_norm_mode"] = h.layer_norm_mode;
  h.for_each_parameter([&](Parameter& p) { w.add_dense(p.name, p.value); });
  w.add_dense("head.running_mean", h.running_mean);
  w.add_dense("head.running_var", h.running_var);
  return w.bytes();
}

inline ClassifierHead load_head(const std::string& bytes) {
  ContainerReader r(bytes);
  if (r.kind() != "head") throw DataError("expected a head file, found '" + r.kind() + "'");
  ClassifierHead h;
  h.dropout = r.meta().at("dropout").get<double>();
  h.momentum = r.meta().at("momentum").get<double>();
  h.eps = r.meta().at("eps").get<double>();
  h.layer_norm_mode = r.meta().at("layer_norm_mode").get<bool>();
  h.w1 = Parameter("head.w1", r.dense("head.w1"));
  h.b1 = Parameter("head.b1", r.dense("head.b1"));
  h.norm_gain = Parameter("head.norm.gain", r.dense("head.norm.gain"));
  h.norm_bias = Parameter("head.norm.bias", r.dense("head.norm.bias"));
  h.w2 = Parameter("head.w2", r.dense("head.w2"));
  h.b2 = Parameter("head.b2", r.dense("head.b2"));
  h.running_mean = r.dense("head.running_mean");
  h.running_var = r.dense("head.running_var");
  return h;
}

/// Preprocessed windows plus the text of the data manifest they were built from.
inline std::string serialize_windows(const DatasetBundle& bundle, const std::string& source_manifest) {
  ContainerWriter w("windows");
  std::vector<std::string> domains = bundle.domains();
  std::map<std::string, int> domain_ids;
  for (std::size_t i = 0; i < domains.size(); ++i) domain_ids[domains[i]] = static_cast<int>(i);
  std::vector<int> labels, dom;
  std::size_t channels = bundle.windows.empty() ? 0 : bundle.windows.front().values.cols();
  Matrix all(bundle.windows.size() * kWindowLen, channels);
  for (std::size_t i = 0; i < bundle.windows.size(); ++i) {
    const Window& win = bundle.windows[i];
    if (win.values.rows() != kWindowLen || win.values.cols() != channels) throw DataError("windows differ in shape");
    std::copy(win.values.values().begin(), win.values.values().end(), all.values().begin() + static_cast<std::ptrdiff_t>(i * win.values.size()));
    labels.push_back(win.label);
    dom.push_back(domain_ids.at(win.domain));
  }
  w.meta()["vocabulary"] = bundle.vocabulary;
  w.meta()["domains"] = domains;
  w.meta()["labels"] = labels;
  w.meta()["domain_index"] = dom;
  w.meta()["window_len"] = kWindowLen;
  w.meta()["channels"] = channels;
  w.meta()["source_manifest"] = source_manifest;
  w.add_dense("windows", all);
  return w.bytes();
}

inline DatasetBundle load_windows(const std::string& bytes, std::string* source_manifest = nullptr) {
  ContainerReader r(bytes);
  if (r.kind() != "windows") throw DataError("expected a window cache, found '" + r.kind() + "'");
  DatasetBundle b;
  b.vocabulary = r.meta().at("vocabulary").get<std::vector<std::string>>();
  const auto domains = r.meta().at("domains").get<std::vector<std::string>>();
  const auto labels = r.meta().at("labels").get<std::vector<int>>();
  const auto dom = r.meta().at("domain_index").get<std::vector<int>>();
  const auto len = r.meta().at("window_len").get<std::size_t>();
  const auto channels = r.meta().at("channels").get<std::size_t>();
  if (source_manifest != nullptr) *source_manifest = r.meta().at("source_manifest").get<std::string>();
  if (labels.size() != dom.size()) throw DataError("window cache label/domain count mismatch");
  if (labels.empty()) return b;
  const Matrix all = r.dense("windows");
  if (all.rows() != labels.size() * len || all.cols() != channels) throw DataError("window cache payload has the wrong shape");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    Window w;
    w.values = Matrix(len, channels);
    const auto first = all.values().begin() + static_cast<std::ptrdiff_t>(i * len * channels);
    std::copy(first, first + static_cast<std::ptrdiff_t>(len * channels), w.values.values().begin());
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= b.vocabulary.size()) throw DataError("window cache label out of range");
    if (dom[i] < 0 || static_cast<std::size_t>(dom[i]) >= domains.size()) throw DataError("window cache domain out of range");
    w.label = labels[i];
    w.domain = domains[static_cast<std::size_t>(dom[i])];
    b.windows.push_back(std::move(w));
  }
  return b;
}

}  // namespace lorahar
