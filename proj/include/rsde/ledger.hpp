// Named numeric constants with provenance.  The transform, flow, and
// uniqueness stages publish what they calibrate here and read everything they
// consume back out, so no stage carries private copies of shared quantities.
#pragma once

#include <map>
#include <string>

#include "rsde/base.hpp"

namespace rsde {

// How an entry was obtained: chosen by hand, estimated from samples, or
// estimated and then confirmed by an independent check.
enum class Provenance { assumed, fitted, verified };

const char* provenance_name(Provenance p);
Provenance provenance_from_name(const std::string& name);

struct LedgerEntry {
  double value = 0.0;
  Provenance provenance = Provenance::assumed;
};

class ConstantsLedger {
 public:
  void set(const std::string& name, double value, Provenance provenance);
  bool has(const std::string& name) const;

  // Value lookup; throws MissingConstant naming the absent key.
  double require(const std::string& name) const;
  double get_or(const std::string& name, double fallback) const;
  const LedgerEntry& entry(const std::string& name) const;

  const std::map<std::string, LedgerEntry>& entries() const { return table_; }
  std::size_t size() const { return table_.size(); }

  // Cross-entry consistency; throws LedgerViolation on failure.  Checks only
  // relations between entries that are actually present.
  void validate() const;

  // JSON round trip.  save() goes through a temp file and rename.
  void save(const std::string& path) const;
  static ConstantsLedger load(const std::string& path);

 private:
  std::map<std::string, LedgerEntry> table_;
};

// Canonical entry names, one definition so call sites cannot drift apart.
namespace keys {
inline constexpr const char* collar_width = "collar_width";
inline constexpr const char* image_collar_width = "image_collar_width";
inline constexpr const char* image_cone_angle = "image_cone_angle";
inline constexpr const char* image_cone_radius = "image_cone_radius";
inline constexpr const char* domain_cone_angle = "domain_cone_angle";
inline constexpr const char* domain_cone_radius = "domain_cone_radius";
inline constexpr const char* patch_cone_angle = "patch_cone_angle";
inline constexpr const char* base_horizon = "base_horizon";
inline constexpr const char* horizon = "horizon";
inline constexpr const char* time_holder_coef = "time_holder_coef";
inline constexpr const char* time_holder_exponent = "time_holder_exponent";
inline constexpr const char* bilip_lower = "bilip_lower";
inline constexpr const char* bilip_upper = "bilip_upper";
inline constexpr const char* close_pair_coef = "close_pair_coef";
inline constexpr const char* gauge_lower = "gauge_lower";
inline constexpr const char* gauge_derivative_coef = "gauge_derivative_coef";
inline constexpr const char* pair_upper_coef = "pair_upper_coef";
inline constexpr const char* pair_lower_coef = "pair_lower_coef";
inline constexpr const char* occupation_coef = "occupation_coef";
inline constexpr const char* remainder_coef = "remainder_coef";
inline constexpr const char* direction_window_radius = "direction_window_radius";
inline constexpr const char* direction_window_halftime =
    "direction_window_halftime";
inline constexpr const char* flow_time_radius = "flow_time_radius";
inline constexpr const char* hitting_time_radius = "hitting_time_radius";
inline constexpr const char* hitting_seed_radius = "hitting_seed_radius";
inline constexpr const char* hitting_window_halftime =
    "hitting_window_halftime";
inline constexpr const char* interior_window_halftime =
    "interior_window_halftime";
inline constexpr const char* cover_window_halftime = "cover_window_halftime";
inline constexpr const char* patch_radius = "patch_radius";
inline constexpr const char* patch_core_fraction = "patch_core_fraction";
inline constexpr const char* boundary_weight = "boundary_weight";
}  // namespace keys

}  // namespace rsde
