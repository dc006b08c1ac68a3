#include "routelab/layer_range.hpp"

#include <charconv>

#include "routelab/errors.hpp"

namespace routelab {

namespace {

int parse_int(std::string_view text, std::string_view whole) {
  int value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty())
    throw ValidationError("invalid layer range '" + std::string(whole) + "'");
  return value;
}

}  // namespace

LayerRange parse_layer_range(std::string_view text) {
  for (std::string_view sep : {"..", ":", "-"}) {
    const auto pos = text.find(sep);
    if (pos == std::string_view::npos || pos == 0) continue;
    LayerRange r{parse_int(text.substr(0, pos), text), parse_int(text.substr(pos + sep.size()), text)};
    if (r.first < 0 || r.first > r.last)
      throw ValidationError("invalid layer range '" + std::string(text) + "'");
    return r;
  }
  const int l = parse_int(text, text);
  if (l < 0) throw ValidationError("invalid layer range '" + std::string(text) + "'");
  return {l, l};
}

}  // namespace routelab
