#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace evcc {

/// One evaluation point. Serialized as a single line of space-separated
/// key=value pairs; doubles use the shortest round-trip representation.
struct MetricsRecord {
  std::int64_t step = 0;
  std::string split;  // train, test, eval, or abort
  std::int64_t samples = 0;
  double loss = 0.0;
  double main = 0.0;
  std::array<double, 3> aux{};  // vit, conv, hybrid
  double accuracy = 0.0;
  double conf = 0.0;
  std::array<double, 3> pi{};  // mean pi_final per branch
  double gamma_v = 0.0;
  double gamma_c = 0.0;
  double lr = 0.0;

  std::string to_line() const;
  /// Throws FormatError on a malformed line or missing key.
  static MetricsRecord parse(std::string_view line);
};

std::string format_double(double v);

}  // namespace evcc
