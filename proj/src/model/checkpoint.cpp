#include "balr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "balr/errors.hpp"

namespace balr {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'B', 'A', 'L', 'R', 'C', 'K', 'P', 'T'};
constexpr std::uint8_t kDtypeF64 = 1;
constexpr std::uint8_t kFlagTrainable = 1;

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}
  template <typename T>
  T get() {
    T v;
    get_bytes(&v, sizeof(T));
    return v;
  }
  void get_bytes(void* out, std::size_t n) {
    if (n > bytes_.size() - pos_) throw FormatError("checkpoint: truncated at byte " + std::to_string(pos_));
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::string get_string() {
    std::string s(get<std::uint32_t>(), '\0');
    get_bytes(s.data(), s.size());
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_model(const Model& model) {
  Writer w;
  w.put_bytes(kMagic, sizeof kMagic);
  w.put(kCheckpointVersion);
  w.put_string(model.cfg.to_text());
  const auto params = model.parameters();
  w.put(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.put_string(p.name);
    w.put(kDtypeF64);
    w.put(static_cast<std::uint8_t>(p.tensor.requires_grad() ? kFlagTrainable : 0));
    w.put(static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto extent : p.tensor.shape()) w.put(static_cast<std::uint64_t>(extent));
    const auto data = p.tensor.data();
    w.put_bytes(data.data(), data.size_bytes());
  }
  return std::move(w.bytes);
}

Model deserialize_model(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[8];
  r.get_bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw FormatError("checkpoint: not a BALR checkpoint");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  auto model = build_balr_model(parse_harness_config(r.get_string()), 0);
  const auto params = model.parameters();
  const auto count = r.get<std::uint32_t>();
  if (count != params.size())
    throw FormatError("checkpoint: holds " + std::to_string(count) + " tensors, model has " +
                      std::to_string(params.size()));
  for (const auto& p : params) {
    const auto name = r.get_string();
    if (name != p.name) throw FormatError("checkpoint: expected tensor '" + p.name + "', found '" + name + "'");
    if (r.get<std::uint8_t>() != kDtypeF64) throw FormatError("checkpoint: tensor '" + name + "' is not f64");
    const bool trainable = (r.get<std::uint8_t>() & kFlagTrainable) != 0;
    const auto ndim = r.get<std::uint32_t>();
    Shape shape(ndim);
    for (auto& e : shape) e = static_cast<std::int64_t>(r.get<std::uint64_t>());
    if (shape != p.tensor.shape())
      throw FormatError("checkpoint: tensor '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                        shape_str(p.tensor.shape()));
    if (trainable != p.tensor.requires_grad())
      throw FormatError("checkpoint: trainable flag of '" + name + "' disagrees with the config");
    auto dst = Tensor(p.tensor).mutable_data();
    r.get_bytes(dst.data(), dst.size_bytes());
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes after the last tensor");
  return model;
}

void save_checkpoint(const Model& model, const std::string& path) {
  const auto bytes = serialize_model(model);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write checkpoint '" + path + "'");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("failed writing checkpoint '" + path + "'");
}

Model load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open checkpoint '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

void copy_parameters(const Model& src, Model& dst) {
  const auto a = src.parameters();
  const auto b = dst.parameters();
  if (a.size() != b.size()) throw ConfigError("copy_parameters: architectures differ");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].tensor.shape() != b[i].tensor.shape())
      throw ConfigError("copy_parameters: tensor '" + a[i].name + "' does not match '" + b[i].name + "'");
    const auto s = a[i].tensor.data();
    auto d = Tensor(b[i].tensor).mutable_data();
    std::copy(s.begin(), s.end(), d.begin());
  }
}

}  // namespace balr
