#include "evcc/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "evcc/errors.hpp"

namespace evcc {

namespace {

constexpr char kMagic[4] = {'E', 'V', 'C', 'C'};

template <typename U>
void put(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n)
      throw FormatError("checkpoint truncated at byte offset " + std::to_string(pos_));
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

template <typename T>
void put_values(std::string& out, const std::vector<T>& values) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (T v : values) put(out, std::bit_cast<U>(v));
}

template <typename T>
std::vector<T> get_values(Reader& in, std::size_t n) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  std::vector<T> v(n);
  for (auto& x : v) x = std::bit_cast<T>(in.template get<U>());
  return v;
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

const CheckpointTensor* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, 4);
  put(out, kCheckpointVersion);
  put(out, ckpt.step);
  put(out, ckpt.config_digest);
  put(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    put(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    const bool f64 = std::holds_alternative<std::vector<double>>(t.values);
    put(out, static_cast<std::uint8_t>(f64 ? 2 : 1));
    put(out, static_cast<std::uint8_t>(t.shape.rank()));
    for (Index dim : t.shape.dims()) put(out, static_cast<std::uint64_t>(dim));
    std::visit(
        [&](const auto& values) {
          if (static_cast<Index>(values.size()) != t.shape.numel())
            throw ArgumentError("checkpoint tensor " + t.name + " payload does not match its shape");
          put_values(out, values);
        },
        t.values);
  }
  put(out, fnv1a64(out));
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError("not a checkpoint file (bad magic)");
  if (bytes.size() < 12) throw FormatError("checkpoint truncated at byte offset 4");
  Reader in(bytes.substr(4));
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const auto body = bytes.substr(0, bytes.size() - 8);
  Reader tail(bytes.substr(bytes.size() - 8));
  if (tail.get<std::uint64_t>() != fnv1a64(body)) throw FormatError("checkpoint checksum mismatch");

  Checkpoint ckpt;
  ckpt.step = in.get<std::uint64_t>();
  ckpt.config_digest = in.get<std::uint64_t>();
  const auto count = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    const auto len = in.get<std::uint32_t>();
    t.name = std::string(in.take(len));
    const auto dtype = in.get<std::uint8_t>();
    const auto rank = in.get<std::uint8_t>();
    if (rank > Shape::kMaxRank) throw FormatError("checkpoint tensor " + t.name + " has rank " + std::to_string(rank));
    std::vector<Index> dims(rank);
    for (auto& dim : dims) dim = static_cast<Index>(in.get<std::uint64_t>());
    t.shape = Shape(std::span<const Index>(dims));
    const auto n = static_cast<std::size_t>(t.shape.numel());
    if (dtype == 1)
      t.values = get_values<float>(in, n);
    else if (dtype == 2)
      t.values = get_values<double>(in, n);
    else
      throw FormatError("checkpoint tensor " + t.name + " has unknown dtype code " + std::to_string(dtype));
    ckpt.tensors.push_back(std::move(t));
  }
  if (in.pos() + 4 != body.size()) throw FormatError("checkpoint has trailing bytes before the checksum");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write checkpoint: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

template <typename S>
void append_tensors(Checkpoint& ckpt, const std::vector<NamedTensor<S>>& tensors) {
  for (const auto& t : tensors) {
    const auto d = t.tensor.data();
    ckpt.tensors.push_back({t.name, t.tensor.shape(), std::vector<S>(d.begin(), d.end())});
  }
}

namespace {

template <typename S>
std::vector<S> converted(const CheckpointTensor& t) {
  return std::visit([](const auto& v) { return std::vector<S>(v.begin(), v.end()); }, t.values);
}

}  // namespace

template <typename S>
void restore_parameters(const Checkpoint& ckpt, ParameterStore<S>& store, std::string_view extra_prefix) {
  std::vector<std::string> unknown;
  for (const auto& t : ckpt.tensors)
    if (!store.find(t.name) && (extra_prefix.empty() || !t.name.starts_with(extra_prefix))) unknown.push_back(t.name);
  if (!unknown.empty()) {
    std::string msg = "checkpoint holds tensors unknown to this model:";
    for (const auto& n : unknown) msg += " " + n;
    throw FormatError(msg);
  }
  for (auto& e : store.entries()) {
    const auto* t = ckpt.find(e.name);
    if (!t) throw FormatError("checkpoint is missing parameter " + e.name);
    if (!(t->shape == e.tensor.shape()))
      throw FormatError("checkpoint parameter " + e.name + " has shape " + t->shape.str() + ", model expects " +
                        e.tensor.shape().str());
    const auto values = converted<S>(*t);
    auto dst = e.tensor.mutable_data();
    std::copy(values.begin(), values.end(), dst.begin());
  }
}

template <typename S>
std::vector<NamedTensor<S>> tensors_with_prefix(const Checkpoint& ckpt, std::string_view prefix) {
  std::vector<NamedTensor<S>> out;
  for (const auto& t : ckpt.tensors)
    if (t.name.starts_with(prefix)) out.push_back({t.name, "", Tensor<S>(t.shape, converted<S>(t)), false});
  return out;
}

template void append_tensors(Checkpoint&, const std::vector<NamedTensor<float>>&);
template void append_tensors(Checkpoint&, const std::vector<NamedTensor<double>>&);
template void restore_parameters(const Checkpoint&, ParameterStore<float>&, std::string_view);
template void restore_parameters(const Checkpoint&, ParameterStore<double>&, std::string_view);
template std::vector<NamedTensor<float>> tensors_with_prefix(const Checkpoint&, std::string_view);
template std::vector<NamedTensor<double>> tensors_with_prefix(const Checkpoint&, std::string_view);

}  // namespace evcc
