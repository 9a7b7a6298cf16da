#include "evcc/metrics.hpp"

#include <charconv>
#include <map>

#include "evcc/errors.hpp"

namespace evcc {

std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string MetricsRecord::to_line() const {
  std::string s = "step=" + std::to_string(step) + " split=" + split + " samples=" + std::to_string(samples);
  auto kv = [&](const char* key, double v) { s += std::string(" ") + key + "=" + format_double(v); };
  kv("loss", loss);
  kv("main", main);
  kv("aux_v", aux[0]);
  kv("aux_c", aux[1]);
  kv("aux_x", aux[2]);
  kv("acc", accuracy);
  kv("conf", conf);
  kv("pi_v", pi[0]);
  kv("pi_c", pi[1]);
  kv("pi_x", pi[2]);
  kv("gamma_v", gamma_v);
  kv("gamma_c", gamma_c);
  kv("lr", lr);
  return s;
}

MetricsRecord MetricsRecord::parse(std::string_view line) {
  std::map<std::string, std::string, std::less<>> kv;
  std::size_t pos = 0;
  while (pos < line.size()) {
    while (pos < line.size() && line[pos] == ' ') ++pos;
    if (pos >= line.size()) break;
    auto end = line.find(' ', pos);
    if (end == std::string_view::npos) end = line.size();
    auto token = line.substr(pos, end - pos);
    auto eq = token.find('=');
    if (eq == std::string_view::npos) throw FormatError("metrics token without '=': " + std::string(token));
    kv[std::string(token.substr(0, eq))] = std::string(token.substr(eq + 1));
    pos = end;
  }
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("metrics record lacks key ") + key);
    return it->second;
  };
  auto num = [&](const char* key) {
    const auto& v = get(key);
    double d = 0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), d);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size())
      throw FormatError(std::string("bad number for ") + key + ": " + v);
    return d;
  };
  MetricsRecord r;
  r.step = static_cast<std::int64_t>(num("step"));
  r.split = get("split");
  r.samples = static_cast<std::int64_t>(num("samples"));
  r.loss = num("loss");
  r.main = num("main");
  r.aux = {num("aux_v"), num("aux_c"), num("aux_x")};
  r.accuracy = num("acc");
  r.conf = num("conf");
  r.pi = {num("pi_v"), num("pi_c"), num("pi_x")};
  r.gamma_v = num("gamma_v");
  r.gamma_c = num("gamma_c");
  r.lr = num("lr");
  return r;
}

}  // namespace evcc
