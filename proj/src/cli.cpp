#include "laip/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>

#include "laip/bidiratt.hpp"
#include "laip/checkpoint.hpp"
#include "laip/data.hpp"
#include "laip/errors.hpp"
#include "laip/gradcheck_suite.hpp"
#include "laip/retrieval.hpp"
#include "laip/textproc.hpp"

namespace laip::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename E>
struct EnumNames {
  std::vector<std::pair<std::string, E>> names;

  E parse(const std::string& key, const std::string& s) const {
    for (const auto& [n, v] : names)
      if (n == s) return v;
    std::string allowed;
    for (const auto& [n, v] : names) allowed += (allowed.empty() ? "" : "|") + n;
    throw ConfigError(key + ": '" + s + "' is not one of {" + allowed + "}");
  }
  std::string name(E v) const {
    for (const auto& [n, e] : names)
      if (e == v) return n;
    return "?";
  }
};

const EnumNames<bidiratt::AttentionRow> kRows{{{"cls", bidiratt::AttentionRow::Cls},
                                                {"mask", bidiratt::AttentionRow::Mask}}};
const EnumNames<bidiratt::PhraseSource> kPhraseSources{{{"masked", bidiratt::PhraseSource::Masked},
                                                         {"clean", bidiratt::PhraseSource::Clean}}};
const EnumNames<bidiratt::ScoreHead> kScoreHead{{{"dedicated", bidiratt::ScoreHead::Dedicated},
                                                   {"tied", bidiratt::ScoreHead::Tied}}};
const EnumNames<losses::MpmPositions> kMpm{{{"masked", losses::MpmPositions::Masked},
                                             {"all", losses::MpmPositions::All}}};
const EnumNames<losses::TripletDirection> kTriplet{{{"standard", losses::TripletDirection::Standard},
                                                     {"printed", losses::TripletDirection::Printed}}};
const EnumNames<losses::NegativeSampling> kNeg{{{"hard", losses::NegativeSampling::Hard},
                                                 {"uniform", losses::NegativeSampling::Uniform}}};

struct KeyDef {
  KeyInfo info;
  std::function<void(CliConfig&, const json&)> set;
  std::function<json(const CliConfig&)> get;
};

template <typename T>
T typed(const std::string& key, const json& v) {
  try {
    if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_unsigned()) throw ConfigError(key + ": expected a nonnegative integer");
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError(key + ": expected a number");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(key + ": expected true or false");
    } else {
      if (!v.is_string()) throw ConfigError(key + ": expected a string");
    }
    return v.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

template <typename F>
KeyDef key(std::string name, std::string desc, F access) {
  using T = std::remove_cvref_t<decltype(access(std::declval<CliConfig&>()))>;
  return {{name, std::move(desc)},
          [=](CliConfig& c, const json& v) { access(c) = typed<T>(name, v); },
          [=](const CliConfig& c) { return json(access(const_cast<CliConfig&>(c))); }};
}

template <typename F, typename E>
KeyDef enum_key(std::string name, std::string desc, F access, const EnumNames<E>& table) {
  return {{name, std::move(desc)},
          [=, &table](CliConfig& c, const json& v) { access(c) = table.parse(name, typed<std::string>(name, v)); },
          [=, &table](const CliConfig& c) { return json(table.name(access(const_cast<CliConfig&>(c)))); }};
}

const std::vector<KeyDef>& key_defs() {
  static const std::vector<KeyDef> defs{
      key("d", "model width", [](CliConfig& c) -> auto& { return c.model.d; }),
      key("heads", "attention heads", [](CliConfig& c) -> auto& { return c.model.heads; }),
      key("ffn_dim", "feed-forward hidden width", [](CliConfig& c) -> auto& { return c.model.ffn_dim; }),
      key("n_self_layers", "layers in each unimodal encoder", [](CliConfig& c) -> auto& { return c.model.n_self_layers; }),
      key("n_cross_layers", "cross-modal encoder layers", [](CliConfig& c) -> auto& { return c.model.n_cross_layers; }),
      key("bidiratt_layer", "1-based cross layer feeding the bidirectional weights", [](CliConfig& c) -> auto& { return c.model.bidiratt_layer; }),
      key("proj_dim", "coarse embedding width", [](CliConfig& c) -> auto& { return c.model.proj_dim; }),
      key("separate_phrase_projection", "phrases get their own coarse projection", [](CliConfig& c) -> auto& { return c.model.separate_phrase_projection; }),
      key("stage1_epochs", "epochs of ITC + ITM", [](CliConfig& c) -> auto& { return c.train.stage1_epochs; }),
      key("stage2_epochs", "epochs of the full objective", [](CliConfig& c) -> auto& { return c.train.stage2_epochs; }),
      key("base_lr", "peak learning rate", [](CliConfig& c) -> auto& { return c.train.base_lr; }),
      key("warmup_lr", "learning rate at step 0", [](CliConfig& c) -> auto& { return c.train.warmup_lr; }),
      key("warmup_fraction", "share of each stage spent warming up", [](CliConfig& c) -> auto& { return c.train.warmup_fraction; }),
      key("batch_size", "pairs per batch", [](CliConfig& c) -> auto& { return c.train.batch_size; }),
      key("delta", "triplet margin", [](CliConfig& c) -> auto& { return c.train.delta; }),
      key("alpha", "momentum coefficient", [](CliConfig& c) -> auto& { return c.train.alpha; }),
      key("queue_size", "momentum queue length", [](CliConfig& c) -> auto& { return c.train.queue_size; }),
      key("k_rerank", "candidates reranked by the cross encoder", [](CliConfig& c) -> auto& { return c.train.k_rerank; }),
      key("seed", "seed for every random draw", [](CliConfig& c) -> auto& { return c.train.seed; }),
      key("weight_decay", "decoupled weight decay", [](CliConfig& c) -> auto& { return c.train.weight_decay; }),
      key("max_grad_norm", "global gradient clipping norm, 0 disables", [](CliConfig& c) -> auto& { return c.train.max_grad_norm; }),
      enum_key("biatt_row", "forward-attention row {cls|mask}", [](CliConfig& c) -> auto& { return c.train.biatt_row; }, kRows),
      enum_key("biatt_phrase", "phrase embedding source {masked|clean}", [](CliConfig& c) -> auto& { return c.train.biatt_phrase; }, kPhraseSources),
      enum_key("score_head", "W^s source {dedicated|tied}", [](CliConfig& c) -> auto& { return c.train.score_head; }, kScoreHead),
      enum_key("mpm_positions", "MPM positions {masked|all}", [](CliConfig& c) -> auto& { return c.train.mpm_positions; }, kMpm),
      enum_key("triplet_direction", "triplet hinge {standard|printed}", [](CliConfig& c) -> auto& { return c.train.triplet_direction; }, kTriplet),
      enum_key("neg_sampling", "negative sampling {hard|uniform}", [](CliConfig& c) -> auto& { return c.train.neg_sampling; }, kNeg),
      key("use_triplet", "stage two includes the triplet loss", [](CliConfig& c) -> auto& { return c.train.use_triplet; }),
      key("use_biatt", "stage two includes the BidirAtt loss", [](CliConfig& c) -> auto& { return c.train.use_biatt; }),
      key("use_mpm", "stage two includes the MPM loss", [](CliConfig& c) -> auto& { return c.train.use_mpm; }),
      key("n_identities", "identities generated by gen-data", [](CliConfig& c) -> auto& { return c.n_identities; }),
      key("images_per_identity", "images per identity generated by gen-data", [](CliConfig& c) -> auto& { return c.images_per_identity; }),
      key("lexicon", "word<TAB>tag lexicon file, empty for the built-in one", [](CliConfig& c) -> auto& { return c.lexicon; }),
      key("data", "dataset directory", [](CliConfig& c) -> auto& { return c.data; }),
      key("checkpoint", "checkpoint directory", [](CliConfig& c) -> auto& { return c.checkpoint; }),
      key("out", "output directory", [](CliConfig& c) -> auto& { return c.out; }),
  };
  return defs;
}

std::string keys_footer() {
  std::ostringstream s;
  s << "Config keys (JSON object passed with --config):\n";
  for (const auto& k : config_keys()) s << "  " << k.name << "  " << k.description << '\n';
  return s.str();
}

text::Lexicon load_lexicon(const CliConfig& c) {
  return c.lexicon.empty() ? text::Lexicon::builtin() : text::Lexicon::load(c.lexicon);
}

model::ModelConfig model_config_for(const CliConfig& c, const text::Vocabulary& vocab) {
  auto m = c.model;
  m.grid_rows = data::kGridRows;
  m.grid_cols = data::kGridCols;
  m.patch_pixels = data::kPatchPixels;
  m.vocab_size = vocab.size();
  return m;
}

void require(const std::string& value, const char* what) {
  if (value.empty()) throw CLI::RequiredError(std::string("--") + what);
}

retrieval::Evaluation evaluate_test_split(const data::Dataset& ds, const text::Vocabulary& vocab,
                                          const model::Params& params, const model::ModelConfig& mc, std::size_t k) {
  std::vector<std::vector<text::TokenId>> queries;
  std::vector<std::uint64_t> q_ids, g_ids;
  std::vector<Tensor> gallery;
  for (auto idx : ds.test) {
    const auto& r = ds.records.at(idx);
    queries.push_back(vocab.encode(text::tokenize(r.caption)));
    q_ids.push_back(r.identity);
    gallery.push_back(r.patches());
    g_ids.push_back(r.identity);
  }
  return retrieval::evaluate(queries, q_ids, gallery, g_ids, k, params, mc);
}

void write_reports(const fs::path& dir, const retrieval::Evaluation& ev, std::uint64_t seed, std::ostream& out) {
  fs::create_directories(dir);
  retrieval::write_report_json(dir / "report.json", ev, seed);
  retrieval::write_per_query_csv(dir / "per_query.csv", ev);
  std::ifstream in(dir / "report.json");
  out << in.rdbuf();
}

// Top-garment localization on the test split: localization.csv plus one summary line.
void write_localization(const fs::path& dir, const data::Dataset& ds, const text::Lexicon& lex,
                        const text::Vocabulary& vocab, const model::Params& params, const model::ModelConfig& mc,
                        const train::TrainConfig& tc, std::ostream& out) {
  const bidiratt::BidirAttOptions opts{tc.biatt_row, tc.biatt_phrase, tc.score_head};
  const auto loc = retrieval::top_garment_localization(ds, ds.test, lex, vocab, params, mc, opts);
  std::ofstream csv(dir / "localization.csv");
  if (!csv) throw FormatError("cannot write " + (dir / "localization.csv").string());
  csv << "record,argmax_patch,inside\n";
  for (const auto& h : loc.hits) csv << h.record << ',' << h.argmax << ',' << (h.inside ? 1 : 0) << '\n';
  out << "top-garment localization " << loc.rate() << '\n';
}

int cmd_gen_data(const CliConfig& c, std::ostream& out) {
  require(c.out, "out");
  Rng rng(c.train.seed);
  auto ds = data::generate_dataset(c.n_identities, c.images_per_identity, rng);
  data::save_dataset(c.out, ds);
  out << "wrote " << ds.records.size() << " records to " << c.out << '\n';
  return kOk;
}

int cmd_train(const CliConfig& c, std::ostream& out) {
  require(c.out, "out");
  const auto lex = load_lexicon(c);
  const auto vocab = text::Vocabulary::from_lexicon(lex);
  data::Dataset ds;
  if (c.data.empty()) {
    Rng rng(c.train.seed);
    ds = data::generate_dataset(c.n_identities, c.images_per_identity, rng);
  } else {
    ds = data::load_dataset(c.data);
  }
  const auto mc = model_config_for(c, vocab);
  const fs::path dir = c.out;
  fs::create_directories(dir);
  {
    std::ofstream cfg(dir / "config.json");
    cfg << to_json(c).dump(2) << '\n';
  }
  auto result = train::train(mc, c.train, ds, lex, vocab, {}, dir);
  const auto& last = result.log.back();
  out << "trained " << result.log.size() << " steps, final loss " << last.losses.total << '\n';
  auto ev = evaluate_test_split(ds, vocab, result.params, mc, c.train.k_rerank);
  write_reports(dir, ev, c.train.seed, out);
  write_localization(dir, ds, lex, vocab, result.params, mc, c.train, out);
  return kOk;
}

int cmd_eval(const CliConfig& c, std::ostream& out) {
  require(c.checkpoint, "checkpoint");
  require(c.data, "data");
  require(c.out, "out");
  const auto lex = load_lexicon(c);
  const auto vocab = text::Vocabulary::from_lexicon(lex);
  auto ck = model::load_checkpoint(c.checkpoint);
  if (ck.config.vocab_size != vocab.size())
    throw FormatError("checkpoint vocabulary size " + std::to_string(ck.config.vocab_size) +
                      " does not match the lexicon's " + std::to_string(vocab.size()));
  auto ds = data::load_dataset(c.data);
  auto ev = evaluate_test_split(ds, vocab, ck.params, ck.config, c.train.k_rerank);
  write_reports(c.out, ev, c.train.seed, out);
  write_localization(c.out, ds, lex, vocab, ck.params, ck.config, c.train, out);
  return kOk;
}

int cmd_gradcheck(const CliConfig& c, std::ostream& out) {
  gradcheck::SuiteOptions o;
  o.base_seed = c.train.seed;
  auto entries = gradcheck::run_suite(o);
  bool ok = true;
  out.precision(3);
  for (const auto& [loss, err] : gradcheck::max_by_loss(entries)) {
    out << loss << " max_rel_error " << std::scientific << err << std::defaultfloat << '\n';
    ok = ok && err < 1e-6;
  }
  if (!ok) {
    out << "gradient check exceeded 1e-6\n";
    return kNumerical;
  }
  return kOk;
}

int cmd_parse(const CliConfig& c, std::istream& in, std::ostream& out) {
  const auto lex = load_lexicon(c);
  const auto vocab = text::Vocabulary::from_lexicon(lex);
  std::string line;
  // One output line per input line: the phrases in brackets, space separated.
  while (std::getline(in, line)) {
    const char* sep = "";
    for (const auto& p : text::extract_phrases(line, lex, vocab)) {
      out << sep << '[' << p.text() << ']';
      sep = " ";
    }
    out << '\n';
  }
  return kOk;
}

int cmd_attn_map(const CliConfig& c, std::size_t record, const std::string& phrase_text,
                 std::optional<std::size_t> mask_index, std::size_t layer, std::ostream& out) {
  require(c.checkpoint, "checkpoint");
  require(c.data, "data");
  require(c.out, "out");
  const auto lex = load_lexicon(c);
  const auto vocab = text::Vocabulary::from_lexicon(lex);
  auto ck = model::load_checkpoint(c.checkpoint);
  auto ds = data::load_dataset(c.data);
  if (record >= ds.records.size())
    throw FormatError("record " + std::to_string(record) + " outside a dataset of " +
                      std::to_string(ds.records.size()));
  const auto& rec = ds.records[record];
  std::vector<text::TokenId> tokens;
  if (!phrase_text.empty()) {
    tokens = vocab.encode(text::tokenize(phrase_text));
  } else {
    tokens = retrieval::top_garment_phrase(rec, lex, vocab);
  }
  if (tokens.empty()) throw FormatError("no phrase to map");
  const std::size_t mask = mask_index.value_or(tokens.size() - 1);
  if (layer > ck.config.n_cross_layers) throw ConfigError("--layer outside 1.." + std::to_string(ck.config.n_cross_layers));
  const bidiratt::BidirAttOptions opts{c.train.biatt_row, c.train.biatt_phrase, c.train.score_head};
  auto w = bidiratt::phrase_weights(rec.patches(), tokens, mask, ck.params, ck.config, opts, layer);
  const fs::path dir = c.out;
  fs::create_directories(dir);
  bidiratt::write_heatmap_csv(dir / "heatmap.csv", w, ck.config.grid_rows, ck.config.grid_cols);
  bidiratt::write_pgm(dir / "heatmap.pgm", bidiratt::heatmap_pixels(w.w, ck.config.grid_rows, ck.config.grid_cols),
                      ck.config.grid_cols, ck.config.grid_rows);
  out << "wrote " << (dir / "heatmap.csv").string() << " and " << (dir / "heatmap.pgm").string() << '\n';
  return kOk;
}

}  // namespace

const std::vector<KeyInfo>& config_keys() {
  static const std::vector<KeyInfo> keys = [] {
    std::vector<KeyInfo> k;
    for (const auto& d : key_defs()) k.push_back(d.info);
    return k;
  }();
  return keys;
}

CliConfig apply_json(CliConfig base, const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    const auto& defs = key_defs();
    auto it = std::find_if(defs.begin(), defs.end(), [&](const KeyDef& d) { return d.info.name == key; });
    if (it == defs.end()) throw ConfigError("unknown config key '" + key + "'");
    it->set(base, value);
  }
  return base;
}

json to_json(const CliConfig& c) {
  nlohmann::ordered_json j;
  for (const auto& d : key_defs()) j[d.info.name] = d.get(c);
  return json::parse(j.dump());
}

int run(int argc, const char* const* argv, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Local alignment image-text person search on a synthetic corpus", "laip"};
  app.fallthrough();
  app.require_subcommand(0, 1);
  app.footer(keys_footer());

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir, data_dir, checkpoint_dir, lexicon;
  std::optional<std::size_t> k, layer_flag, identities, images_per_id;
  std::optional<std::string> biatt_row, mpm_positions, triplet_direction, neg_sampling;
  app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "random seed");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--data", data_dir, "dataset directory");
  app.add_option("--checkpoint", checkpoint_dir, "checkpoint directory");
  app.add_option("--lexicon", lexicon, "lexicon file");
  app.add_option("--k", k, "rerank depth")->check(CLI::PositiveNumber);
  app.add_option("--layer", layer_flag, "cross layer for bidirectional attention")->check(CLI::PositiveNumber);
  app.add_option("--identities", identities, "identities to generate");
  app.add_option("--images-per-id", images_per_id, "images per identity");
  app.add_option("--biatt-row", biatt_row, "forward-attention row")->check(CLI::IsMember({"cls", "mask"}));
  app.add_option("--mpm-positions", mpm_positions, "MPM positions")->check(CLI::IsMember({"masked", "all"}));
  app.add_option("--triplet-direction", triplet_direction, "triplet hinge direction")
      ->check(CLI::IsMember({"standard", "printed"}));
  app.add_option("--neg-sampling", neg_sampling, "negative sampling")->check(CLI::IsMember({"hard", "uniform"}));

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus into --out");
  auto* trn = app.add_subcommand("train", "two-stage training into --out (checkpoints, log, report)");
  auto* evl = app.add_subcommand("eval", "evaluate --checkpoint on the test split of --data");
  auto* gck = app.add_subcommand("gradcheck", "finite-difference check of every loss");
  auto* prs = app.add_subcommand("parse", "print the noun phrases of each stdin line");
  auto* amp = app.add_subcommand("attn-map", "bidirectional-attention heatmap for one image and phrase");
  std::size_t record = 0;
  std::string phrase_text;
  std::optional<std::size_t> mask_index;
  amp->add_option("--record", record, "dataset record index");
  amp->add_option("--phrase", phrase_text, "phrase text (default: the caption's top-garment phrase)");
  amp->add_option("--mask-index", mask_index, "phrase token replaced by [MASK] (default: the last)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }
  if (app.get_subcommands().empty()) {
    err << app.help();
    return kUsage;
  }

  try {
    CliConfig c;
    if (!config_path.empty()) {
      std::ifstream f(config_path);
      json j;
      try {
        j = json::parse(f);
      } catch (const json::parse_error& e) {
        throw ConfigError(config_path + ": " + e.what());
      }
      c = apply_json(c, j);
    }
    if (seed) c.train.seed = *seed;
    if (out_dir) c.out = *out_dir;
    if (data_dir) c.data = *data_dir;
    if (checkpoint_dir) c.checkpoint = *checkpoint_dir;
    if (lexicon) c.lexicon = *lexicon;
    if (k) c.train.k_rerank = *k;
    if (identities) c.n_identities = *identities;
    if (images_per_id) c.images_per_identity = *images_per_id;
    if (biatt_row) c.train.biatt_row = kRows.parse("--biatt-row", *biatt_row);
    if (mpm_positions) c.train.mpm_positions = kMpm.parse("--mpm-positions", *mpm_positions);
    if (triplet_direction) c.train.triplet_direction = kTriplet.parse("--triplet-direction", *triplet_direction);
    if (neg_sampling) c.train.neg_sampling = kNeg.parse("--neg-sampling", *neg_sampling);
    std::size_t attn_layer = 0;
    if (layer_flag) {
      c.model.bidiratt_layer = *layer_flag;
      attn_layer = *layer_flag;
    }

    auto* sub = app.get_subcommands().front();
    if (sub == gen) return cmd_gen_data(c, out);
    if (sub == trn) return cmd_train(c, out);
    if (sub == evl) return cmd_eval(c, out);
    if (sub == gck) return cmd_gradcheck(c, out);
    if (sub == prs) return cmd_parse(c, in, out);
    if (sub == amp) return cmd_attn_map(c, record, phrase_text, mask_index, attn_layer, out);
    return kUsage;
  } catch (const CLI::RequiredError& e) {
    err << "error: " << e.what() << " is required\n";
    return kUsage;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  }
}

}  // namespace laip::cli
