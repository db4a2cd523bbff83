#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "laip/model.hpp"
#include "laip/trainer.hpp"

namespace laip::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kNumerical = 3 };

struct CliConfig {
  model::ModelConfig model;
  train::TrainConfig train;
  std::size_t n_identities = 8;
  std::size_t images_per_identity = 4;
  std::string lexicon;     // empty: the built-in lexicon
  std::string data;        // dataset directory
  std::string checkpoint;  // checkpoint directory
  std::string out;         // output directory
};

struct KeyInfo {
  std::string name;
  std::string description;
};

// Every key accepted in a JSON config file.
const std::vector<KeyInfo>& config_keys();
// Applies the keys of j on top of base; unknown keys and bad values are ConfigErrors.
CliConfig apply_json(CliConfig base, const nlohmann::json& j);
nlohmann::json to_json(const CliConfig& config);

// Runs one subcommand and returns its exit code.
int run(int argc, const char* const* argv, std::istream& in, std::ostream& out, std::ostream& err);

}  // namespace laip::cli
