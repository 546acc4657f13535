#include "moedt/model.hpp"

#include <cmath>
#include <numbers>

#include "moedt/hash.hpp"
#include "moedt/rng.hpp"

namespace moedt {

namespace {

constexpr double kInitStd = 0.02;

// Dropout sites inside a block.
enum DropSite : uint64_t { kEmbed = 1, kAttn = 2, kFfn = 3, kMoe = 4 };

std::vector<float> normal_values(uint64_t seed, const std::string& name, size_t n,
                                 double stddev) {
  const uint64_t key = hash_key({seed, fnv1a64(name)});
  std::vector<float> out(n);
  for (size_t i = 0; i < n; ++i) {
    const double u1 = unit_uniform(mix64(key ^ mix64(2 * i)));
    const double u2 = unit_uniform(mix64(key ^ mix64(2 * i + 1)));
    const double z = std::sqrt(-2.0 * std::log1p(-u1)) * std::cos(2.0 * std::numbers::pi * u2);
    out[i] = static_cast<float>(stddev * z);
  }
  return out;
}

void add_normal(ParamSet<float>& p, const std::string& name, Shape shape, Component c,
                uint64_t seed) {
  const auto n = static_cast<size_t>(shape_numel(shape));
  p.add(name, std::move(shape), normal_values(seed, name, n, kInitStd), c);
}

void add_const(ParamSet<float>& p, const std::string& name, Shape shape, float value,
               Component c) {
  const auto n = static_cast<size_t>(shape_numel(shape));
  p.add(name, std::move(shape), std::vector<float>(n, value), c);
}

void add_linear(ParamSet<float>& p, const std::string& prefix, int in, int out,
                Component c, uint64_t seed) {
  add_normal(p, prefix + ".w", {in, out}, c, seed);
  add_const(p, prefix + ".b", {out}, 0.0f, c);
}

void add_layer_norm(ParamSet<float>& p, const std::string& prefix, int dim, Component c) {
  add_const(p, prefix + ".g", {dim}, 1.0f, c);
  add_const(p, prefix + ".b", {dim}, 0.0f, c);
}

template <typename T>
Tensor<T> linear(const ParamSet<T>& p, const std::string& prefix, const Tensor<T>& x) {
  return add_bias(matmul(x, p[prefix + ".w"]), p[prefix + ".b"]);
}

template <typename T>
Tensor<T> norm(const ParamSet<T>& p, const std::string& prefix, const Tensor<T>& x) {
  return layer_norm(x, p[prefix + ".g"], p[prefix + ".b"]);
}

template <typename T>
Tensor<T> activate(const Tensor<T>& x, Activation act) {
  return act == Activation::relu ? relu(x) : gelu(x);
}

template <typename T>
Tensor<T> maybe_dropout(const Tensor<T>& x, const ForwardOptions& opts, double p,
                        uint64_t layer, uint64_t site) {
  if (!opts.training || p <= 0.0) return x;
  return dropout(x, p, hash_key({opts.dropout_seed, static_cast<uint64_t>(opts.step), layer, site}));
}

void check_expert_index(int e, int n) {
  if (e < 0 || e >= n) {
    throw Error("routing: expert index " + std::to_string(e) + " outside [0, " +
                std::to_string(n) + ")");
  }
}

template <typename T>
Tensor<T> ffn_sublayer(const ParamSet<T>& params, const ModelConfig& cfg, const MoEConfig& moe,
                       int block, const Tensor<T>& x, const Routing& routing,
                       std::span<const int> expert_per_row, const ForwardOptions* opts) {
  const std::string bp = block_prefix(block);
  const Tensor<T> h = norm(params, bp + ".ln2", x);
  Tensor<T> f = ffn_forward(params, bp + ".ffn", h, cfg.activation);
  if (opts) f = maybe_dropout(f, *opts, cfg.dropout, static_cast<uint64_t>(block), kFfn);
  Tensor<T> y = add(x, f);
  if (routing.kind == Routing::Kind::backbone_only) return y;
  Tensor<T> m = moe_forward(params, cfg, moe, block, h, routing, expert_per_row);
  if (opts) m = maybe_dropout(m, *opts, cfg.dropout, static_cast<uint64_t>(block), kMoe);
  return add(y, m);
}

}  // namespace

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "gelu"; }

Activation parse_activation(const std::string& text) {
  if (text == "relu") return Activation::relu;
  if (text == "gelu") return Activation::gelu;
  throw ConfigError("unknown activation '" + text + "'");
}

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model config: " + what);
  };
  need(n_layers >= 1, "n_layers must be >= 1");
  need(n_heads >= 1, "n_heads must be >= 1");
  need(hidden_dim >= 1 && hidden_dim % n_heads == 0, "hidden_dim must be divisible by n_heads");
  need(ffn_dim >= 0, "ffn_dim must be >= 0");
  need(context_K >= 1, "context_K must be >= 1");
  need(prompt_Kstar >= 0, "prompt_Kstar must be >= 0");
  need(max_state_dim >= 1 && max_action_dim >= 1, "max dims must be >= 1");
  need(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
  need(max_episode_len >= 1, "max_episode_len must be >= 1");
  need(rtg_scale > 0.0, "rtg_scale must be positive");
}

void MoEConfig::validate() const {
  if (n_experts < 1) throw ConfigError("moe config: n_experts must be >= 1");
  if (router_layers < 2) throw ConfigError("moe config: router_layers must be >= 2");
  if (router_hidden < 0) throw ConfigError("moe config: router_hidden must be >= 0");
}

Routing Routing::parse(const std::string& text) {
  auto number = [&](const std::string& s) {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError("bad routing mode '" + text + "'");
    }
    return std::stoi(s);
  };
  if (text == "backbone") return backbone_only();
  if (text == "dense") return dense();
  if (text == "oracle") return oracle();
  if (text.rfind("topk:", 0) == 0) return topk(number(text.substr(5)));
  if (text.rfind("hard:", 0) == 0) return hard(number(text.substr(5)));
  throw ConfigError("bad routing mode '" + text + "'");
}

std::string Routing::str() const {
  switch (kind) {
    case Kind::backbone_only:
      return "backbone";
    case Kind::dense:
      return "dense";
    case Kind::topk:
      return "topk:" + std::to_string(k);
    case Kind::hard:
      return "hard:" + std::to_string(expert);
    case Kind::oracle:
      return "oracle";
  }
  return "?";
}

std::string block_prefix(int block) { return "backbone.block" + std::to_string(block); }

std::string expert_prefix(int expert, int block) {
  return "expert" + std::to_string(expert) + ".block" + std::to_string(block);
}

ActionMask ActionMask::first_n(int n, int max_action_dim) {
  if (n < 1 || n > max_action_dim) {
    throw Error("action mask: " + std::to_string(n) + " valid dims outside [1, " +
                std::to_string(max_action_dim) + "]");
  }
  ActionMask m;
  m.valid_dims.assign(static_cast<size_t>(max_action_dim), 0);
  for (int i = 0; i < n; ++i) m.valid_dims[i] = 1;
  return m;
}

// ---- inputs -----------------------------------------------------------------

TokenSequence build_input(const ModelConfig& cfg, const StepWindow& prompt,
                          const StepWindow& segment) {
  for (const StepWindow* w : {&prompt, &segment}) {
    if (w->state_dim > cfg.max_state_dim || w->action_dim > cfg.max_action_dim) {
      throw Error("build_input: dims (" + std::to_string(w->state_dim) + ", " +
                  std::to_string(w->action_dim) + ") exceed max (" +
                  std::to_string(cfg.max_state_dim) + ", " +
                  std::to_string(cfg.max_action_dim) + ")");
    }
    const size_t len = w->rtg.size();
    if (w->states.size() != len * w->state_dim || w->actions.size() != len * w->action_dim ||
        w->timesteps.size() != len) {
      throw Error("build_input: inconsistent window arrays");
    }
  }
  if (prompt.length() > 0 &&
      (prompt.state_dim != segment.state_dim || prompt.action_dim != segment.action_dim)) {
    throw Error("build_input: prompt and segment come from different task shapes");
  }
  if (prompt.length() > cfg.prompt_Kstar) {
    throw Error("build_input: prompt has " + std::to_string(prompt.length()) +
                " steps, more than prompt_Kstar=" + std::to_string(cfg.prompt_Kstar));
  }
  if (segment.length() < 1 || segment.length() > cfg.context_K) {
    throw Error("build_input: segment length " + std::to_string(segment.length()) +
                " outside [1, " + std::to_string(cfg.context_K) + "]");
  }

  TokenSequence seq;
  seq.prompt_steps = cfg.prompt_Kstar;
  seq.segment_steps = cfg.context_K;
  const int steps = seq.steps();
  const int S = cfg.max_state_dim, A = cfg.max_action_dim;
  seq.rtg.assign(steps, 0.0f);
  seq.states.assign(static_cast<size_t>(steps) * S, 0.0f);
  seq.actions.assign(static_cast<size_t>(steps) * A, 0.0f);
  seq.timesteps.assign(steps, 0);
  seq.step_valid.assign(steps, 0);
  seq.action_mask = ActionMask::first_n(segment.action_dim, A);

  const float inv_scale = static_cast<float>(1.0 / cfg.rtg_scale);
  auto place = [&](const StepWindow& w, int slot0, int capacity) {
    const int pad = capacity - w.length();
    for (int i = 0; i < w.length(); ++i) {
      const int s = slot0 + pad + i;
      seq.rtg[s] = w.rtg[i] * inv_scale;
      for (int d = 0; d < w.state_dim; ++d) seq.states[s * S + d] = w.states[i * w.state_dim + d];
      for (int d = 0; d < w.action_dim; ++d) seq.actions[s * A + d] = w.actions[i * w.action_dim + d];
      if (w.timesteps[i] < 0 || w.timesteps[i] >= cfg.max_episode_len) {
        throw Error("build_input: timestep " + std::to_string(w.timesteps[i]) +
                    " outside the timestep table");
      }
      seq.timesteps[s] = w.timesteps[i];
      seq.step_valid[s] = 1;
    }
  };
  place(prompt, 0, cfg.prompt_Kstar);
  place(segment, cfg.prompt_Kstar, cfg.context_K);

  for (int s = 0; s < steps; ++s) {
    for (TokenKind k : {TokenKind::rtg, TokenKind::state, TokenKind::action}) {
      seq.kinds.push_back(k);
      seq.sources.push_back(s < cfg.prompt_Kstar ? TokenSource::prompt : TokenSource::segment);
      seq.token_timesteps.push_back(seq.timesteps[s]);
      seq.token_valid.push_back(seq.step_valid[s]);
    }
  }
  return seq;
}

ModelBatch collate(const ModelConfig& cfg, std::span<const TokenSequence> seqs) {
  if (seqs.empty()) throw Error("collate: empty batch");
  ModelBatch b;
  b.batch = static_cast<int>(seqs.size());
  b.steps = cfg.steps();
  b.prompt_steps = cfg.prompt_Kstar;
  for (const auto& s : seqs) {
    if (s.steps() != b.steps) throw Error("collate: sequence length mismatch");
    b.rtg.insert(b.rtg.end(), s.rtg.begin(), s.rtg.end());
    b.states.insert(b.states.end(), s.states.begin(), s.states.end());
    b.actions.insert(b.actions.end(), s.actions.begin(), s.actions.end());
    b.timesteps.insert(b.timesteps.end(), s.timesteps.begin(), s.timesteps.end());
    b.step_valid.insert(b.step_valid.end(), s.step_valid.begin(), s.step_valid.end());
    b.token_valid.insert(b.token_valid.end(), s.token_valid.begin(), s.token_valid.end());
    b.action_mask.insert(b.action_mask.end(), s.action_mask.valid_dims.begin(),
                         s.action_mask.valid_dims.end());
  }
  return b;
}

// ---- parameters -------------------------------------------------------------

ParamSet<float> init_backbone(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ParamSet<float> p;
  const auto bb = Component::backbone();
  const int H = cfg.hidden_dim, F = cfg.ffn_width();
  add_linear(p, "backbone.embed.rtg", 1, H, bb, seed);
  add_linear(p, "backbone.embed.state", cfg.max_state_dim, H, bb, seed);
  add_linear(p, "backbone.embed.action", cfg.max_action_dim, H, bb, seed);
  add_normal(p, "backbone.embed.time", {cfg.max_episode_len, H}, bb, seed);
  add_layer_norm(p, "backbone.embed.ln", H, bb);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string bp = block_prefix(l);
    add_layer_norm(p, bp + ".ln1", H, bb);
    add_linear(p, bp + ".attn.qkv", H, 3 * H, bb, seed);
    add_linear(p, bp + ".attn.proj", H, H, bb, seed);
    add_layer_norm(p, bp + ".ln2", H, bb);
    add_linear(p, bp + ".ffn.fc1", H, F, bb, seed);
    add_linear(p, bp + ".ffn.fc2", F, H, bb, seed);
  }
  add_layer_norm(p, "backbone.ln_f", H, bb);
  add_linear(p, "backbone.head", H, cfg.max_action_dim, bb, seed);
  return p;
}

void add_experts_function_preserving(ParamSet<float>& params, const ModelConfig& cfg,
                                     int n_experts) {
  const int H = cfg.hidden_dim, F = cfg.ffn_width();
  for (int e = 0; e < n_experts; ++e) {
    const auto c = Component::expert_of(e);
    for (int l = 0; l < cfg.n_layers; ++l) {
      const std::string ffn = block_prefix(l) + ".ffn";
      const std::string ep = expert_prefix(e, l);
      for (const char* part : {".fc1.w", ".fc1.b"}) {
        const auto& src = params[ffn + part];
        if (src.numel() != (std::string(part) == ".fc1.w" ? int64_t{H} * F : int64_t{F})) {
          throw ShapeError("init experts: backbone " + ffn + part + " has shape " +
                           shape_str(src.shape()));
        }
        params.add(ep + part, src.shape(), std::vector<float>(src.data().begin(), src.data().end()), c);
      }
      add_const(params, ep + ".fc2.w", {F, H}, 0.0f, c);
      add_const(params, ep + ".fc2.b", {H}, 0.0f, c);
    }
  }
}

void add_experts_random(ParamSet<float>& params, const ModelConfig& cfg, int n_experts,
                        uint64_t seed) {
  const int H = cfg.hidden_dim, F = cfg.ffn_width();
  for (int e = 0; e < n_experts; ++e) {
    const auto c = Component::expert_of(e);
    for (int l = 0; l < cfg.n_layers; ++l) {
      const std::string ep = expert_prefix(e, l);
      add_linear(params, ep + ".fc1", H, F, c, seed);
      add_linear(params, ep + ".fc2", F, H, c, seed);
    }
  }
}

void add_router(ParamSet<float>& params, const ModelConfig& cfg, const MoEConfig& moe,
                uint64_t seed) {
  moe.validate();
  const auto c = Component::router();
  const int H = cfg.hidden_dim, R = moe.router_width(cfg);
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int j = 0; j < moe.router_layers; ++j) {
      const int in = j == 0 ? H : R;
      const int out = j + 1 == moe.router_layers ? moe.n_experts : R;
      const std::string name = "router.block" + std::to_string(l) + ".l" + std::to_string(j);
      // Fan-in scaling keeps signal alive through the MLP; the output layer
      // stays small so routing starts close to uniform.
      const double std = j + 1 == moe.router_layers ? kInitStd : std::sqrt(2.0 / in);
      params.add(name + ".w", {in, out}, normal_values(seed, name + ".w", static_cast<size_t>(in * out), std), c);
      add_const(params, name + ".b", {out}, 0.0f, c);
    }
  }
}

int count_experts(const ParamSet<float>& params) {
  int n = 0;
  for (const auto& c : params.components()) {
    if (c.kind == Component::Kind::expert) n = std::max(n, c.expert + 1);
  }
  return n;
}

// ---- forward ----------------------------------------------------------------

template <typename T>
Tensor<T> embed_tokens(const ParamSet<T>& params, const ModelConfig& cfg,
                       const ModelBatch& batch, const ForwardOptions& opts) {
  const int64_t rows = int64_t{batch.batch} * batch.steps;
  const int S = cfg.max_state_dim, A = cfg.max_action_dim;
  auto as_t = [](const std::vector<float>& v) { return std::vector<T>(v.begin(), v.end()); };
  const auto rtg_in = Tensor<T>::from_data({rows, 1}, as_t(batch.rtg));
  const auto state_in = Tensor<T>::from_data({rows, S}, as_t(batch.states));
  const auto action_in = Tensor<T>::from_data({rows, A}, as_t(batch.actions));
  const auto time = embedding(params["backbone.embed.time"], std::span<const int64_t>(batch.timesteps));

  const auto e_r = add(linear(params, "backbone.embed.rtg", rtg_in), time);
  const auto e_s = add(linear(params, "backbone.embed.state", state_in), time);
  const auto e_a = add(linear(params, "backbone.embed.action", action_in), time);
  const auto stacked = concat_rows<T>({e_r, e_s, e_a});

  std::vector<int64_t> perm(static_cast<size_t>(3 * rows));
  for (int64_t b = 0; b < batch.batch; ++b) {
    for (int64_t s = 0; s < batch.steps; ++s) {
      for (int64_t k = 0; k < 3; ++k) {
        perm[b * 3 * batch.steps + 3 * s + k] = k * rows + b * batch.steps + s;
      }
    }
  }
  auto tokens = norm(params, "backbone.embed.ln", gather_rows(stacked, std::span<const int64_t>(perm)));
  return maybe_dropout(tokens, opts, cfg.dropout, 0xffff, kEmbed);
}

template <typename T>
Tensor<T> forward_tokens(const ParamSet<T>& params, const ModelConfig& cfg,
                         const MoEConfig& moe, const Tensor<T>& tokens,
                         const ModelBatch& batch, const ForwardOptions& opts) {
  const int64_t seq_len = 3 * int64_t{batch.steps};
  const int64_t token_rows = batch.batch * seq_len;
  if (tokens.rows() != token_rows || tokens.cols() != cfg.hidden_dim) {
    throw ShapeError("forward: tokens " + shape_str(tokens.shape()) + " for batch of " +
                     std::to_string(batch.batch));
  }

  std::vector<int> expert_per_row;
  const auto kind = opts.routing.kind;
  if (kind == Routing::Kind::hard || kind == Routing::Kind::oracle) {
    if (!batch.expert_per_sequence.empty()) {
      if (static_cast<int>(batch.expert_per_sequence.size()) != batch.batch) {
        throw Error("forward: expert_per_sequence has wrong length");
      }
      expert_per_row.reserve(static_cast<size_t>(token_rows));
      for (int e : batch.expert_per_sequence) expert_per_row.insert(expert_per_row.end(), seq_len, e);
    } else if (kind == Routing::Kind::oracle) {
      throw Error("forward: oracle routing needs an expert per sequence");
    }
  }

  Tensor<T> x = tokens;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string bp = block_prefix(l);
    const auto h = norm(params, bp + ".ln1", x);
    const auto qkv = linear(params, bp + ".attn.qkv", h);
    auto a = causal_self_attention(qkv, batch.batch, seq_len, cfg.n_heads,
                                   std::span<const uint8_t>(batch.token_valid));
    a = maybe_dropout(linear(params, bp + ".attn.proj", a), opts, cfg.dropout,
                      static_cast<uint64_t>(l), kAttn);
    x = add(x, a);
    x = ffn_sublayer(params, cfg, moe, l, x, opts.routing, expert_per_row, &opts);
  }
  x = norm(params, "backbone.ln_f", x);

  std::vector<int64_t> state_rows(static_cast<size_t>(batch.batch) * batch.steps);
  for (int64_t b = 0; b < batch.batch; ++b) {
    for (int64_t s = 0; s < batch.steps; ++s) state_rows[b * batch.steps + s] = b * seq_len + 3 * s + 1;
  }
  const auto xs = gather_rows(x, std::span<const int64_t>(state_rows));
  return tanh(linear(params, "backbone.head", xs));
}

template <typename T>
Tensor<T> forward(const ParamSet<T>& params, const ModelConfig& cfg, const MoEConfig& moe,
                  const ModelBatch& batch, const ForwardOptions& opts) {
  return forward_tokens(params, cfg, moe, embed_tokens(params, cfg, batch, opts), batch, opts);
}

template <typename T>
Tensor<T> dt_loss(const Tensor<T>& pred, std::span<const T> target, std::span<const T> mask) {
  return masked_mse(pred, target, mask);
}

template <typename T>
Tensor<T> dt_loss(const Tensor<T>& pred, const ModelBatch& batch, const ModelConfig& cfg) {
  const int A = cfg.max_action_dim;
  const size_t n = static_cast<size_t>(batch.batch) * batch.steps * A;
  std::vector<T> target(n), mask(n, T(0));
  for (int b = 0; b < batch.batch; ++b) {
    for (int s = 0; s < batch.steps; ++s) {
      const size_t row = static_cast<size_t>(b) * batch.steps + s;
      const bool use = s >= batch.prompt_steps && batch.step_valid[row];
      for (int d = 0; d < A; ++d) {
        target[row * A + d] = static_cast<T>(batch.actions[row * A + d]);
        if (use && batch.action_mask[static_cast<size_t>(b) * A + d]) mask[row * A + d] = T(1);
      }
    }
  }
  return masked_mse(pred, std::span<const T>(target), std::span<const T>(mask));
}

// ---- MoE --------------------------------------------------------------------

template <typename T>
Tensor<T> ffn_forward(const ParamSet<T>& params, const std::string& prefix, const Tensor<T>& x,
                      Activation act) {
  return linear(params, prefix + ".fc2", activate(linear(params, prefix + ".fc1", x), act));
}

template <typename T>
Tensor<T> router_logits(const ParamSet<T>& params, int block, const Tensor<T>& x,
                        const MoEConfig& moe, Activation act) {
  Tensor<T> h = x;
  const std::string rp = "router.block" + std::to_string(block) + ".l";
  for (int j = 0; j < moe.router_layers; ++j) {
    h = linear(params, rp + std::to_string(j), h);
    if (j + 1 < moe.router_layers) h = activate(h, act);
  }
  return h;
}

template <typename T>
Tensor<T> combine_experts(const ParamSet<T>& params, int block, const Tensor<T>& x,
                          const Tensor<T>& weights, Activation act) {
  const int64_t rows = weights.rows(), n = weights.cols();
  if (rows != x.rows()) throw ShapeError("combine_experts: " + shape_str(weights.shape()) + " vs " + shape_str(x.shape()));
  const auto w = weights.data();
  Tensor<T> acc;
  for (int64_t e = 0; e < n; ++e) {
    bool used = false;
    for (int64_t r = 0; r < rows && !used; ++r) used = w[r * n + e] != T(0);
    if (!used) continue;
    const auto y = ffn_forward(params, expert_prefix(static_cast<int>(e), block), x, act);
    const auto term = scale_rows(y, slice_cols(weights, e, e + 1));
    acc = acc.defined() ? add(acc, term) : term;
  }
  if (!acc.defined()) acc = Tensor<T>::zeros({x.rows(), x.cols()});
  return acc;
}

template <typename T>
Tensor<T> moe_forward(const ParamSet<T>& params, const ModelConfig& cfg, const MoEConfig& moe,
                      int block, const Tensor<T>& x, const Routing& routing,
                      std::span<const int> expert_per_row) {
  const int n = moe.n_experts;
  switch (routing.kind) {
    case Routing::Kind::backbone_only:
      return Tensor<T>::zeros({x.rows(), x.cols()});
    case Routing::Kind::dense:
      return combine_experts(params, block, x,
                             softmax_rows(router_logits(params, block, x, moe, cfg.activation)),
                             cfg.activation);
    case Routing::Kind::topk:
      if (routing.k < 1 || routing.k > n) {
        throw Error("topk routing: k=" + std::to_string(routing.k) + " outside [1, " +
                    std::to_string(n) + "]");
      }
      return combine_experts(
          params, block, x,
          topk_softmax_rows(router_logits(params, block, x, moe, cfg.activation), routing.k),
          cfg.activation);
    case Routing::Kind::hard:
    case Routing::Kind::oracle: {
      if (expert_per_row.empty()) {
        if (routing.kind == Routing::Kind::oracle) {
          throw Error("oracle routing needs an expert index per row");
        }
        check_expert_index(routing.expert, n);
        return ffn_forward(params, expert_prefix(routing.expert, block), x, cfg.activation);
      }
      if (static_cast<int64_t>(expert_per_row.size()) != x.rows()) {
        throw ShapeError("hard routing: expert_per_row length mismatch");
      }
      bool uniform = true;
      for (int e : expert_per_row) {
        check_expert_index(e, n);
        uniform = uniform && e == expert_per_row[0];
      }
      if (uniform) return ffn_forward(params, expert_prefix(expert_per_row[0], block), x, cfg.activation);
      std::vector<T> onehot(static_cast<size_t>(x.rows()) * n, T(0));
      for (size_t r = 0; r < expert_per_row.size(); ++r) onehot[r * n + expert_per_row[r]] = T(1);
      return combine_experts(params, block, x, Tensor<T>::from_data({x.rows(), n}, std::move(onehot)),
                             cfg.activation);
    }
  }
  throw Error("moe_forward: unknown routing");
}

template <typename T>
Tensor<T> block_forward(const ParamSet<T>& params, const ModelConfig& cfg, const MoEConfig& moe,
                        int block, const Tensor<T>& x, const Routing& routing,
                        std::span<const int> expert_per_row) {
  return ffn_sublayer(params, cfg, moe, block, x, routing, expert_per_row, nullptr);
}

std::vector<double> topk_route(std::span<const double> logits, int k) {
  NoGradGuard guard;
  const auto t = Tensor<double>::from_data({1, static_cast<int64_t>(logits.size())},
                                           std::vector<double>(logits.begin(), logits.end()));
  const auto w = topk_softmax_rows(t, k);
  return {w.data().begin(), w.data().end()};
}

#define MOEDT_INSTANTIATE(T)                                                                  \
  template Tensor<T> embed_tokens(const ParamSet<T>&, const ModelConfig&, const ModelBatch&,  \
                                  const ForwardOptions&);                                     \
  template Tensor<T> forward_tokens(const ParamSet<T>&, const ModelConfig&, const MoEConfig&, \
                                    const Tensor<T>&, const ModelBatch&,                      \
                                    const ForwardOptions&);                                   \
  template Tensor<T> forward(const ParamSet<T>&, const ModelConfig&, const MoEConfig&,        \
                             const ModelBatch&, const ForwardOptions&);                       \
  template Tensor<T> dt_loss(const Tensor<T>&, const ModelBatch&, const ModelConfig&);        \
  template Tensor<T> dt_loss(const Tensor<T>&, std::span<const T>, std::span<const T>);       \
  template Tensor<T> ffn_forward(const ParamSet<T>&, const std::string&, const Tensor<T>&,    \
                                 Activation);                                                 \
  template Tensor<T> router_logits(const ParamSet<T>&, int, const Tensor<T>&,                 \
                                   const MoEConfig&, Activation);                             \
  template Tensor<T> combine_experts(const ParamSet<T>&, int, const Tensor<T>&,               \
                                     const Tensor<T>&, Activation);                           \
  template Tensor<T> moe_forward(const ParamSet<T>&, const ModelConfig&, const MoEConfig&,    \
                                 int, const Tensor<T>&, const Routing&,                       \
                                 std::span<const int>);                                       \
  template Tensor<T> block_forward(const ParamSet<T>&, const ModelConfig&, const MoEConfig&,  \
                                   int, const Tensor<T>&, const Routing&,                     \
                                   std::span<const int>);

MOEDT_INSTANTIATE(float)
MOEDT_INSTANTIATE(double)

#undef MOEDT_INSTANTIATE

}  // namespace moedt
