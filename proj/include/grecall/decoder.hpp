#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "grecall/nn.hpp"

namespace grecall::nn {

enum class Act { Tanh, Relu, Gelu };

// Plain MLP: affine layers with an activation between them (not after the
// last). Parameter names are prefix.w0/b0, prefix.w1/b1, ...
struct MlpSpec {
  std::vector<int> dims;  // e.g. {32, 64, 16}
  Act act = Act::Tanh;
  std::string prefix;
};

void mlp_init(ParameterSet& ps, const MlpSpec& spec, uint64_t seed,
              double init_std = 0.1);
Var mlp_forward(Tape& tape, ParameterSet& ps, const MlpSpec& spec, Var x);

// Pre-LN causal transformer decoder over a flat token vocabulary.
struct DecoderSpec {
  int vocab = 0;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int max_seq = 64;
  int mlp_mult = 4;
  std::string prefix = "dec";
};

void decoder_init(ParameterSet& ps, const DecoderSpec& spec, uint64_t seed,
                  double init_std = 0.08);

// Batched training forward over end-padded sequences (pad token id 0 is
// fine: causality keeps pad positions from influencing earlier ones, and
// the loss masks them out). Returns hidden states [B,T,d_model].
Var decoder_hidden(Tape& tape, ParameterSet& ps, const DecoderSpec& spec,
                   const std::vector<int>& tokens, int batch, int seq_len);

// Vocabulary logits for selected flat rows (b*T + t) of the hidden states.
Var decoder_logits_at(Tape& tape, ParameterSet& ps, const DecoderSpec& spec,
                      Var hidden, std::vector<int64_t> flat_rows);

// Incremental no-gradient path for generation and scoring. Produces the
// same logits as the tape forward (verified by tests).
struct KvCache {
  int len = 0;
  std::vector<std::vector<double>> k;  // per layer, len*d_model flat
  std::vector<std::vector<double>> v;
};

// Feeds one token, returns logits [vocab] for the next position.
std::vector<double> decoder_step(const ParameterSet& ps, const DecoderSpec& spec,
                                 KvCache& cache, int token);
// Feeds all tokens, returns logits after the last one.
std::vector<double> decoder_prefill(const ParameterSet& ps,
                                    const DecoderSpec& spec, KvCache& cache,
                                    const std::vector<int>& tokens);

}  // namespace grecall::nn
