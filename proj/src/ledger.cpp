#include "rsde/ledger.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>

namespace rsde {

const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::assumed:
      return "assumed";
    case Provenance::fitted:
      return "fitted";
    case Provenance::verified:
      return "verified";
  }
  return "assumed";
}

Provenance provenance_from_name(const std::string& name) {
  if (name == "assumed") return Provenance::assumed;
  if (name == "fitted") return Provenance::fitted;
  if (name == "verified") return Provenance::verified;
  throw ConfigError("unknown provenance tag '" + name + "'");
}

void ConstantsLedger::set(const std::string& name, double value,
                          Provenance provenance) {
  if (!std::isfinite(value)) {
    throw LedgerViolation("non-finite value for '" + name + "'");
  }
  table_[name] = LedgerEntry{value, provenance};
}

bool ConstantsLedger::has(const std::string& name) const {
  return table_.count(name) != 0;
}

double ConstantsLedger::require(const std::string& name) const {
  auto it = table_.find(name);
  if (it == table_.end()) throw MissingConstant(name);
  return it->second.value;
}

double ConstantsLedger::get_or(const std::string& name,
                               double fallback) const {
  auto it = table_.find(name);
  return it == table_.end() ? fallback : it->second.value;
}

const LedgerEntry& ConstantsLedger::entry(const std::string& name) const {
  auto it = table_.find(name);
  if (it == table_.end()) throw MissingConstant(name);
  return it->second;
}

void ConstantsLedger::validate() const {
  // The image collar is tied to the collar and the contraction floor of the
  // transform whenever all three are on file.
  if (has(keys::image_collar_width) && has(keys::bilip_lower) &&
      has(keys::collar_width)) {
    double expected =
        require(keys::bilip_lower) * require(keys::collar_width) / 2.0;
    double got = require(keys::image_collar_width);
    if (std::abs(got - expected) > 1e-9 * std::max(1.0, std::abs(expected))) {
      throw LedgerViolation("image_collar_width " + std::to_string(got) +
                            " != bilip_lower * collar_width / 2 = " +
                            std::to_string(expected));
    }
  }
  if (has(keys::patch_cone_angle) && has(keys::image_cone_angle)) {
    double cap = std::min(require(keys::image_cone_angle) / 2.0,
                          std::atan(1.0 / 24.0));
    if (require(keys::patch_cone_angle) >= cap) {
      throw LedgerViolation("patch_cone_angle exceeds its admissible cap");
    }
  }
}

void ConstantsLedger::save(const std::string& path) const {
  nlohmann::json root;
  for (const auto& [name, entry] : table_) {
    root["constants"][name] = {{"value", entry.value},
                               {"provenance", provenance_name(entry.provenance)}};
  }
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw IoError("cannot open '" + tmp + "' for writing");
    out << root.dump(2) << "\n";
    if (!out) throw IoError("short write to '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw IoError("cannot move '" + tmp + "' to '" + path + "'");
  }
}

ConstantsLedger ConstantsLedger::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  nlohmann::json root;
  try {
    in >> root;
  } catch (const std::exception& e) {
    throw IoError("bad ledger JSON in '" + path + "': " + e.what());
  }
  ConstantsLedger ledger;
  if (!root.contains("constants")) return ledger;
  for (const auto& [name, entry] : root["constants"].items()) {
    ledger.set(name, entry.at("value").get<double>(),
               provenance_from_name(entry.at("provenance").get<std::string>()));
  }
  return ledger;
}

}  // namespace rsde
