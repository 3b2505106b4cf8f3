#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace grecall {

struct Item {
  int64_t item_id = 0;
  int category_id = 0;
  std::vector<int> title_tokens;
  std::vector<double> attribute_vector;  // latent; relevance oracle only
  double efficiency_score = 0.0;
  std::vector<double> embedding;

  bool operator==(const Item&) const = default;
};

struct Query {
  int64_t query_id = 0;
  int source_category = 0;  // generator-internal ground truth
  std::vector<int> tokens;
  std::vector<double> embedding;

  bool operator==(const Query&) const = default;
};

enum class InteractionKind { Exposure, Click, Purchase };

const char* kind_name(InteractionKind k);
InteractionKind kind_from_name(const std::string& s);

struct Interaction {
  int64_t query_id = 0;
  int64_t user_id = 0;
  int64_t item_id = 0;
  InteractionKind kind = InteractionKind::Exposure;
  int64_t timestamp = 0;

  bool operator==(const Interaction&) const = default;
};

struct UserProfile {
  int64_t user_id = 0;
  int gender = 0;
  int age_group = 0;
  // (category_id, item_id) click events, non-decreasing in time.
  std::vector<std::pair<int, int64_t>> history;

  bool operator==(const UserProfile&) const = default;
};

struct GeneratorConfig {
  int categories = 12;
  int items = 2000;
  int queries = 1000;
  int users = 200;
  int tokens_per_category = 12;
  int shared_tokens = 40;
  int title_len = 6;
  int query_len = 5;
  double category_token_prob = 0.62;  // title token drawn from own category slice
  int attr_dim = 16;
  double attr_noise = 0.5;
  double query_attr_noise = 0.25;
  int d_in = 32;
  int exposure_per_query = 20;  // M
  double exposure_noise = 0.05;
  double click_rate = 0.15;
  double click_temperature = 0.5;
  double purchase_rate = 0.2;
  uint64_t seed = 7;

  int text_vocab_size() const {
    return categories * tokens_per_category + shared_tokens;
  }
  bool operator==(const GeneratorConfig&) const = default;
};

struct CorpusBundle {
  GeneratorConfig config;
  std::vector<Item> items;
  std::vector<Query> queries;
  std::vector<Interaction> interactions;
  std::vector<UserProfile> users;

  bool operator==(const CorpusBundle&) const = default;

  const Item& item_by_id(int64_t id) const;
  const Query& query_by_id(int64_t id) const;
};

// Bag-of-tokens random projection into d_in dimensions, L2-normalized.
// Each token's projection row comes from a substream of encoder_seed, so
// identical token multisets map to identical vectors regardless of order.
std::vector<double> embed_text(const std::vector<int>& tokens, int d_in,
                               uint64_t encoder_seed);

CorpusBundle generate_corpus(const GeneratorConfig& config);

// Serialized forms, one file per record kind. save_corpus writes them under
// a directory; corpus_files exposes the exact bytes for determinism checks.
std::map<std::string, std::string> corpus_files(const CorpusBundle& bundle);
void save_corpus(const CorpusBundle& bundle, const std::string& dir);
CorpusBundle load_corpus(const std::string& dir);

std::string generator_config_to_text(const GeneratorConfig& config);
GeneratorConfig generator_config_from_text(const std::vector<std::string>& lines,
                                           const std::string& path);

}  // namespace grecall
