#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "pewire/errors.hpp"

namespace pewire {

enum class HeadMode { kCls, kGap };

inline std::string to_string(HeadMode m) { return m == HeadMode::kCls ? "cls" : "gap"; }
inline HeadMode head_mode_from_string(const std::string& s) {
  if (s == "cls") return HeadMode::kCls;
  if (s == "gap") return HeadMode::kGap;
  throw config_error("unknown head mode '" + s + "' (expected cls|gap)");
}

// The five wirings. fig5b is Default plus PE delivered to the Last LN with no
// per-layer delivery (the non-layer-wise control).
enum class WiringVariant { kDefault, kLaPE, kPVG, kMPVG, kNonLayerwiseLastLN };

inline std::string to_string(WiringVariant v) {
  switch (v) {
    case WiringVariant::kDefault: return "default";
    case WiringVariant::kLaPE: return "lape";
    case WiringVariant::kPVG: return "pvg";
    case WiringVariant::kMPVG: return "mpvg";
    case WiringVariant::kNonLayerwiseLastLN: return "fig5b";
  }
  return "?";
}

inline WiringVariant variant_from_string(const std::string& s) {
  if (s == "default") return WiringVariant::kDefault;
  if (s == "lape") return WiringVariant::kLaPE;
  if (s == "pvg") return WiringVariant::kPVG;
  if (s == "mpvg") return WiringVariant::kMPVG;
  if (s == "fig5b") return WiringVariant::kNonLayerwiseLastLN;
  throw config_error("unknown wiring variant '" + s + "'");
}

// Variant selector plus the ablation knobs. Fully determines the dataflow.
struct WiringConfig {
  WiringVariant variant = WiringVariant::kDefault;
  bool include_layer0 = false;   // deliver PE to layer 0 (layer-wise variants)
  bool hierarchical = true;      // chain pos_l = LN'_l(pos_{l-1}) vs LN'_l(pos_0)
  bool add_pe_at_input = true;   // x_0 = tokens + pos
  std::optional<int> last_ln_pe_index;  // chain index delivered to the Last LN
  HeadMode head_mode = HeadMode::kGap;

  bool layerwise() const {
    return variant == WiringVariant::kLaPE || variant == WiringVariant::kPVG ||
           variant == WiringVariant::kMPVG;
  }
  bool has_last_ln_pe() const { return last_ln_pe_index.has_value(); }

  // Layer indices receiving per-layer PE injection, ascending.
  std::vector<int> delivered_layers(int num_layers) const {
    std::vector<int> out;
    if (!layerwise()) return out;
    for (int l = include_layer0 ? 0 : 1; l < num_layers; ++l) out.push_back(l);
    return out;
  }

  void validate(int num_layers) const {
    const bool needs_last = variant == WiringVariant::kMPVG ||
                            variant == WiringVariant::kNonLayerwiseLastLN;
    if (needs_last != has_last_ln_pe())
      throw config_error("wiring '" + to_string(variant) + "': last-LN PE index must be " +
                         (needs_last ? "set" : "none"));
    if (has_last_ln_pe()) {
      const int k = *last_ln_pe_index;
      if (k < 0 || k >= num_layers)
        throw config_error("last-LN PE index " + std::to_string(k) + " out of range [0," +
                           std::to_string(num_layers - 1) + "]");
      if (variant == WiringVariant::kNonLayerwiseLastLN && k != 0)
        throw config_error("fig5b has no PE chain; last-LN PE index must be 0");
      if (k > 0) {
        const auto layers = delivered_layers(num_layers);
        if (std::find(layers.begin(), layers.end(), k) == layers.end())
          throw config_error("last-LN PE index " + std::to_string(k) +
                             " is not a delivered layer");
      }
    }
  }

  // Canonical round-trippable form of the preset grammar.
  std::string to_preset_string() const {
    std::string s = to_string(variant);
    if (layerwise()) {
      s += std::string(",layer0=") + (include_layer0 ? "true" : "false");
      s += std::string(",hier=") + (hierarchical ? "true" : "false");
      s += std::string(",xpe=") + (add_pe_at_input ? "true" : "false");
    }
    if (has_last_ln_pe()) s += ",last=" + std::to_string(*last_ln_pe_index);
    s += ",head=" + to_string(head_mode);
    return s;
  }
};

namespace detail {
inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw config_error("wiring preset: bad boolean '" + v + "' for key '" + key + "'");
}
}  // namespace detail

// Preset grammar: "variant[,key=value...]" with keys layer0, hier, xpe, last,
// head. Canonical presets follow the paper; overrides apply on top. Knobs a
// variant cannot honor are rejected.
inline WiringConfig variant_preset(const std::string& preset) {
  std::vector<std::string> parts;
  size_t start = 0;
  while (start <= preset.size()) {
    const size_t comma = preset.find(',', start);
    const size_t end = comma == std::string::npos ? preset.size() : comma;
    parts.push_back(preset.substr(start, end - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (parts.empty() || parts[0].empty()) throw config_error("empty wiring preset");

  WiringConfig w;
  w.variant = variant_from_string(parts[0]);
  switch (w.variant) {
    case WiringVariant::kDefault:
      w.head_mode = HeadMode::kCls;
      break;
    case WiringVariant::kLaPE:
      w.include_layer0 = true;
      w.hierarchical = true;
      w.add_pe_at_input = false;
      w.head_mode = HeadMode::kCls;
      break;
    case WiringVariant::kPVG:
      w.include_layer0 = false;
      w.hierarchical = true;
      w.add_pe_at_input = true;
      w.head_mode = HeadMode::kGap;
      break;
    case WiringVariant::kMPVG:
      w.include_layer0 = false;
      w.hierarchical = true;
      w.add_pe_at_input = true;
      w.last_ln_pe_index = 0;
      w.head_mode = HeadMode::kGap;
      break;
    case WiringVariant::kNonLayerwiseLastLN:
      w.last_ln_pe_index = 0;
      w.head_mode = HeadMode::kGap;
      break;
  }

  for (size_t i = 1; i < parts.size(); ++i) {
    const std::string& kv = parts[i];
    const size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw config_error("wiring preset: expected key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
    const bool lw = w.layerwise();
    if (key == "layer0") {
      if (!lw) throw config_error("wiring preset: layer0 override not valid for '" + parts[0] + "'");
      w.include_layer0 = detail::parse_bool(key, val);
    } else if (key == "hier") {
      if (!lw) throw config_error("wiring preset: hier override not valid for '" + parts[0] + "'");
      w.hierarchical = detail::parse_bool(key, val);
    } else if (key == "xpe") {
      if (!lw) throw config_error("wiring preset: xpe override not valid for '" + parts[0] + "'");
      w.add_pe_at_input = detail::parse_bool(key, val);
    } else if (key == "last") {
      if (w.variant != WiringVariant::kMPVG && w.variant != WiringVariant::kNonLayerwiseLastLN)
        throw config_error("wiring preset: last-LN PE index not valid for '" + parts[0] + "'");
      if (val == "none")
        throw config_error("wiring preset: '" + parts[0] + "' requires a last-LN PE index (use pvg/default instead)");
      try {
        size_t pos = 0;
        const int k = std::stoi(val, &pos);
        if (pos != val.size()) throw std::invalid_argument(val);
        w.last_ln_pe_index = k;
      } catch (const std::exception&) {
        throw config_error("wiring preset: bad last-LN PE index '" + val + "'");
      }
    } else if (key == "head") {
      w.head_mode = head_mode_from_string(val);
    } else {
      throw config_error("wiring preset: unknown key '" + key + "'");
    }
  }
  return w;
}

}  // namespace pewire
