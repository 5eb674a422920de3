#include "mla/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>

#include "mla/errors.hpp"

namespace mla {

namespace {

constexpr char kMagic[4] = {'M', 'L', 'A', '1'};

template <typename U>
void put_le(std::string& buf, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  Reader(std::string bytes, std::string origin) : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

  bool done() const { return pos_ == bytes_.size(); }

  template <typename U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("truncated checkpoint: " + origin_);
  }

  std::string bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParameterList& tensors) {
  std::string buf(kMagic, kMagic + 4);
  for (const auto& p : tensors) {
    put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(p.name.size()));
    buf += p.name;
    const auto& shape = p.tensor.shape();
    put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(shape.size()));
    for (auto e : shape) put_le<std::uint64_t>(buf, static_cast<std::uint64_t>(e));
    for (double v : p.tensor.data()) put_le<std::uint64_t>(buf, std::bit_cast<std::uint64_t>(v));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

ParameterList read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(bytes), path.string());
  if (r.take(4) != std::string(kMagic, 4)) throw FormatError("bad checkpoint magic: " + path.string());
  ParameterList out;
  while (!r.done()) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name = r.take(name_len);
    const auto rank = r.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = std::bit_cast<double>(r.get<std::uint64_t>());
    out.add(std::move(name), Tensor::from(std::move(shape), std::move(values)));
  }
  return out;
}

void load_checkpoint_into(const std::filesystem::path& path, const ParameterList& into) {
  const ParameterList stored = read_checkpoint(path);
  for (const auto& p : into) {
    const Parameter* src = stored.find(p.name);
    if (!src) throw FormatError("checkpoint " + path.string() + " lacks tensor " + p.name);
    if (src->tensor.shape() != p.tensor.shape()) {
      throw FormatError("checkpoint tensor " + p.name + " has shape " + shape_str(src->tensor.shape()) +
                        ", expected " + shape_str(p.tensor.shape()));
    }
    Tensor dst = p.tensor;
    std::copy(src->tensor.data().begin(), src->tensor.data().end(), dst.mutable_data().begin());
  }
}

}  // namespace mla
