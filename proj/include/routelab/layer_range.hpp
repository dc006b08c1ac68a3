#pragma once

#include <optional>
#include <string>
#include <string_view>

namespace routelab {

// Inclusive, zero-based range of layer indices.
struct LayerRange {
  int first = 0;
  int last = 0;

  bool contains(int layer) const { return layer >= first && layer <= last; }
  bool valid_for(int num_layers) const { return first >= 0 && first <= last && last < num_layers; }
  std::string str() const { return std::to_string(first) + ".." + std::to_string(last); }

  bool operator==(const LayerRange&) const = default;
};

// Accepts "lo:hi", "lo..hi", "lo-hi" or a single "l". Throws ValidationError.
LayerRange parse_layer_range(std::string_view text);

}  // namespace routelab
