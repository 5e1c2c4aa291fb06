#include "metricforge/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "metricforge/errors.hpp"

namespace metricforge {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ContractError("config: invalid value '" + value + "' for " + key + " (expected " + expected + ")");
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  bad_value(key, v, "a number");
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) bad_value(key, v, "a non-negative integer");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  bad_value(key, v, "true or false");
}

std::vector<std::size_t> to_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  if (trim(v).empty()) return out;
  std::istringstream in(v);
  for (std::string item; std::getline(in, item, ',');) out.push_back(to_uint(key, trim(item)));
  return out;
}

bool to_space(const std::string& key, const std::string& v) {
  if (v == "normalized") return true;
  if (v == "raw") return false;
  bad_value(key, v, "normalized or raw");
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Field {
  std::function<void(TrainConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = [] {
    std::vector<std::pair<std::string, Field>> t;
    const auto add_double = [&t](const char* key, auto accessor) {
      t.push_back({key,
                   {[accessor](TrainConfig& c, const std::string& k, const std::string& v) { accessor(c) = to_double(k, v); },
                    [accessor](const TrainConfig& c) { return fmt(accessor(c)); }}});
    };
    const auto add_uint = [&t](const char* key, auto accessor) {
      t.push_back({key,
                   {[accessor](TrainConfig& c, const std::string& k, const std::string& v) {
                      accessor(c) = static_cast<std::remove_reference_t<decltype(accessor(c))>>(to_uint(k, v));
                    },
                    [accessor](const TrainConfig& c) { return std::to_string(accessor(c)); }}});
    };
    const auto add_list = [&t](const char* key, auto accessor) {
      t.push_back({key,
                   {[accessor](TrainConfig& c, const std::string& k, const std::string& v) { accessor(c) = to_list(k, v); },
                    [accessor](const TrainConfig& c) { return join(accessor(c)); }}});
    };
    const auto add_space = [&t](const char* key, auto accessor) {
      t.push_back({key,
                   {[accessor](TrainConfig& c, const std::string& k, const std::string& v) { accessor(c) = to_space(k, v); },
                    [accessor](const TrainConfig& c) {
                      return std::string(accessor(c) ? "normalized" : "raw");
                    }}});
    };

    add_double("lambda_npair", [](auto& c) -> auto& { return c.weights.lambda_npair; });
    add_double("lambda_soft", [](auto& c) -> auto& { return c.weights.lambda_soft; });
    add_double("lambda_tri", [](auto& c) -> auto& { return c.weights.lambda_tri; });
    add_double("lambda_ang", [](auto& c) -> auto& { return c.weights.lambda_ang; });
    add_double("margin", [](auto& c) -> auto& { return c.weights.triplet_margin; });
    add_double("alpha_deg", [](auto& c) -> auto& { return c.weights.angular_alpha_deg; });
    add_space("triplet_space", [](auto& c) -> auto& { return c.weights.triplet_on_normalized; });
    add_space("angular_space", [](auto& c) -> auto& { return c.weights.angular_on_normalized; });
    add_space("npair_space", [](auto& c) -> auto& { return c.weights.npair_on_normalized; });
    add_uint("p", [](auto& c) -> auto& { return c.P; });
    add_uint("k", [](auto& c) -> auto& { return c.K; });
    add_double("lr", [](auto& c) -> auto& { return c.adam.lr; });
    add_double("beta1", [](auto& c) -> auto& { return c.adam.beta1; });
    add_double("beta2", [](auto& c) -> auto& { return c.adam.beta2; });
    add_double("eps", [](auto& c) -> auto& { return c.adam.eps; });
    add_uint("pretrain_epochs", [](auto& c) -> auto& { return c.pretrain_epochs; });
    add_uint("epochs", [](auto& c) -> auto& { return c.epochs; });
    add_uint("seed", [](auto& c) -> auto& { return c.seed; });
    add_uint("checkpoint_every", [](auto& c) -> auto& { return c.checkpoint_every; });
    add_list("channels", [](auto& c) -> auto& { return c.model.channels; });
    add_list("blocks", [](auto& c) -> auto& { return c.model.blocks; });
    add_list("se_stages", [](auto& c) -> auto& { return c.model.se_stages; });
    add_uint("se_reduction", [](auto& c) -> auto& { return c.model.se_reduction; });
    add_uint("embedding_dim", [](auto& c) -> auto& { return c.model.embedding_dim; });
    t.push_back({"spectrum",
                 {[](TrainConfig& c, const std::string&, const std::string& v) {
                    c.features.spectrum = parse_spectrum_kind(v);
                  },
                  [](const TrainConfig& c) { return to_string(c.features.spectrum); }}});
    t.push_back({"log",
                 {[](TrainConfig& c, const std::string& k, const std::string& v) { c.features.log_compress = to_bool(k, v); },
                  [](const TrainConfig& c) { return std::string(c.features.log_compress ? "true" : "false"); }}});
    t.push_back({"norm",
                 {[](TrainConfig& c, const std::string&, const std::string& v) { c.features.norm = parse_normalization(v); },
                  [](const TrainConfig& c) { return to_string(c.features.norm); }}});
    return t;
  }();
  return table;
}

}  // namespace

void apply_setting(TrainConfig& cfg, const std::string& key_in, const std::string& value_in) {
  const std::string key = trim(key_in), value = trim(value_in);
  for (const auto& [name, field] : fields()) {
    if (name == key) {
      field.set(cfg, key, value);
      return;
    }
  }
  throw ContractError("config: unknown key '" + key + "'");
}

std::pair<std::string, std::string> split_setting(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ContractError("config: expected key=value, got '" + text + "'");
  return {trim(text.substr(0, eq)), trim(text.substr(eq + 1))};
}

void load_config_file(const std::filesystem::path& path, TrainConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    try {
      const auto [key, value] = split_setting(line);
      apply_setting(cfg, key, value);
    } catch (const ContractError& e) {
      throw ContractError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, field] : fields()) k.push_back(name);
    return k;
  }();
  return keys;
}

std::string dump_config(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [name, field] : fields()) out += name + " = " + field.get(cfg) + "\n";
  return out;
}

}  // namespace metricforge
