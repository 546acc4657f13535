#pragma once

// Prompt-conditioned decision transformer with an optional per-block
// mixture-of-experts branch beside each feed-forward sublayer.
//
// Token layout per sequence: (rtg, state, action) for each of the
// prompt_Kstar prompt steps, followed by the same triple for each of the
// context_K segment steps. Actions are predicted from state tokens.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "moedt/params.hpp"
#include "moedt/tensor.hpp"

namespace moedt {

enum class Activation { relu, gelu };

std::string to_string(Activation a);
Activation parse_activation(const std::string& text);

struct ModelConfig {
  int n_layers = 3;
  int n_heads = 4;
  int hidden_dim = 64;
  int ffn_dim = 0;  // 0 -> 4 * hidden_dim
  int context_K = 20;
  int prompt_Kstar = 5;
  int max_state_dim = 4;
  int max_action_dim = 2;
  double dropout = 0.1;
  int max_episode_len = 64;
  Activation activation = Activation::relu;
  double rtg_scale = 100.0;

  int ffn_width() const { return ffn_dim > 0 ? ffn_dim : 4 * hidden_dim; }
  int steps() const { return prompt_Kstar + context_K; }
  void validate() const;
};

struct MoEConfig {
  int n_experts = 4;
  int router_layers = 5;  // number of linear maps in the router MLP
  int router_hidden = 0;  // 0 -> hidden_dim

  int router_width(const ModelConfig& m) const {
    return router_hidden > 0 ? router_hidden : m.hidden_dim;
  }
  void validate() const;
};

// How the expert branch combines expert outputs.
struct Routing {
  enum class Kind { backbone_only, dense, topk, hard, oracle };
  Kind kind = Kind::dense;
  int k = 0;       // topk
  int expert = 0;  // hard

  static Routing backbone_only() { return {Kind::backbone_only, 0, 0}; }
  static Routing dense() { return {Kind::dense, 0, 0}; }
  static Routing topk(int k) { return {Kind::topk, k, 0}; }
  static Routing hard(int j) { return {Kind::hard, 0, j}; }
  static Routing oracle() { return {Kind::oracle, 0, 0}; }

  // "backbone", "dense", "topk:<k>", "hard:<j>", "oracle"
  static Routing parse(const std::string& text);
  std::string str() const;
};

// ---- inputs -------------------------------------------------------------

// Consecutive steps of one trajectory in its native dimensions.
struct StepWindow {
  int state_dim = 0;
  int action_dim = 0;
  std::vector<float> rtg;         // [len]
  std::vector<float> states;      // [len * state_dim]
  std::vector<float> actions;     // [len * action_dim]
  std::vector<int64_t> timesteps;  // [len]

  int length() const { return static_cast<int>(rtg.size()); }
};

struct ActionMask {
  std::vector<uint8_t> valid_dims;  // [max_action_dim]

  static ActionMask first_n(int n, int max_action_dim);
};

enum class TokenKind : uint8_t { rtg, state, action };
enum class TokenSource : uint8_t { prompt, segment };

// One model input sequence, zero-padded to the model's dimensions and
// left-padded in time. Step-level arrays have prompt_Kstar + context_K
// entries; token-level arrays have three times that.
struct TokenSequence {
  int prompt_steps = 0;
  int segment_steps = 0;
  std::vector<float> rtg;           // scaled return-to-go per step
  std::vector<float> states;        // [steps * max_state_dim]
  std::vector<float> actions;       // [steps * max_action_dim]
  std::vector<int64_t> timesteps;   // [steps]
  std::vector<uint8_t> step_valid;  // 0 for padding
  ActionMask action_mask;

  std::vector<TokenKind> kinds;
  std::vector<TokenSource> sources;
  std::vector<int64_t> token_timesteps;
  std::vector<uint8_t> token_valid;

  int steps() const { return prompt_steps + segment_steps; }
  int num_tokens() const { return 3 * steps(); }
};

TokenSequence build_input(const ModelConfig& cfg, const StepWindow& prompt,
                          const StepWindow& segment);

// Several sequences stacked along the row dimension.
struct ModelBatch {
  int batch = 0;
  int steps = 0;
  int prompt_steps = 0;
  std::vector<float> rtg, states, actions;
  std::vector<int64_t> timesteps;
  std::vector<uint8_t> step_valid;   // [batch * steps]
  std::vector<uint8_t> token_valid;  // [batch * 3 * steps]
  std::vector<uint8_t> action_mask;  // [batch * max_action_dim]
  std::vector<int> expert_per_sequence;  // used by hard/oracle routing
};

ModelBatch collate(const ModelConfig& cfg, std::span<const TokenSequence> seqs);

// ---- parameters ------------------------------------------------------------

ParamSet<float> init_backbone(const ModelConfig& cfg, uint64_t seed);
// Experts whose first map copies the backbone FFN's first map and whose
// output map is zero, so the expert branch outputs exactly zero.
void add_experts_function_preserving(ParamSet<float>& params, const ModelConfig& cfg,
                                     int n_experts);
void add_experts_random(ParamSet<float>& params, const ModelConfig& cfg, int n_experts,
                        uint64_t seed);
void add_router(ParamSet<float>& params, const ModelConfig& cfg, const MoEConfig& moe,
                uint64_t seed);

int count_experts(const ParamSet<float>& params);

// ---- forward ---------------------------------------------------------------

struct ForwardOptions {
  Routing routing = Routing::backbone_only();
  bool training = false;    // enables dropout
  uint64_t dropout_seed = 0;
  int64_t step = 0;         // dropout key component
};

template <typename T>
Tensor<T> embed_tokens(const ParamSet<T>& params, const ModelConfig& cfg,
                       const ModelBatch& batch, const ForwardOptions& opts);

// Predicted actions for every state token: [batch * steps, max_action_dim].
template <typename T>
Tensor<T> forward_tokens(const ParamSet<T>& params, const ModelConfig& cfg,
                         const MoEConfig& moe, const Tensor<T>& tokens,
                         const ModelBatch& batch, const ForwardOptions& opts);

template <typename T>
Tensor<T> forward(const ParamSet<T>& params, const ModelConfig& cfg, const MoEConfig& moe,
                  const ModelBatch& batch, const ForwardOptions& opts);

// Mean squared error over segment steps that are not padding and action
// dimensions that are valid for the sequence's task.
template <typename T>
Tensor<T> dt_loss(const Tensor<T>& pred, const ModelBatch& batch, const ModelConfig& cfg);

// Same, with an explicit per-element mask and targets.
template <typename T>
Tensor<T> dt_loss(const Tensor<T>& pred, std::span<const T> target, std::span<const T> mask);

// ---- MoE pieces --------------------------------------------------------------

template <typename T>
Tensor<T> ffn_forward(const ParamSet<T>& params, const std::string& prefix,
                      const Tensor<T>& x, Activation act);

template <typename T>
Tensor<T> router_logits(const ParamSet<T>& params, int block, const Tensor<T>& x,
                        const MoEConfig& moe, Activation act);

// Weighted sum of expert outputs; weights is [rows, n_experts]. Experts whose
// weight column is entirely zero are not evaluated.
template <typename T>
Tensor<T> combine_experts(const ParamSet<T>& params, int block, const Tensor<T>& x,
                          const Tensor<T>& weights, Activation act);

// Expert branch of one block. `expert_per_row` is used by hard and oracle
// routing (one entry per row of x).
template <typename T>
Tensor<T> moe_forward(const ParamSet<T>& params, const ModelConfig& cfg,
                      const MoEConfig& moe, int block, const Tensor<T>& x,
                      const Routing& routing, std::span<const int> expert_per_row);

// Residual FFN sublayer of one block: x + ffn(x_norm) + moe(x_norm).
// Attention is not included.
template <typename T>
Tensor<T> block_forward(const ParamSet<T>& params, const ModelConfig& cfg,
                        const MoEConfig& moe, int block, const Tensor<T>& x,
                        const Routing& routing, std::span<const int> expert_per_row);

// Routing weights for one logit vector.
std::vector<double> topk_route(std::span<const double> logits, int k);

std::string block_prefix(int block);
std::string expert_prefix(int expert, int block);

}  // namespace moedt
