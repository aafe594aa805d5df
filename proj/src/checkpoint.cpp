#include "cope/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

#include "cope/hash.hpp"

namespace cope {

namespace {

constexpr char kMagic[5] = {'C', 'O', 'P', 'E', '1'};
constexpr std::uint8_t kModelKind = 'M';
constexpr std::uint8_t kAdapterKind = 'A';

using Kind = CheckpointError::Kind;

class Writer {
 public:
  template <class T>
  void put(T value) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    buf_.insert(buf_.end(), bytes.begin(), bytes.end());
  }
  void put_bytes(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  void put_doubles(std::span<const double> v) {
    for (double d : v) put(d);
  }
  void put_checksum() {
    Fnv1a h;
    h.update(std::as_bytes(std::span(buf_)));
    put(h.digest());
  }

  std::uint64_t write(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw CheckpointError(Kind::io, "cannot write " + tmp);
      out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
      if (!out) throw CheckpointError(Kind::io, "short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
    Fnv1a h;
    h.update(std::as_bytes(std::span(buf_)));
    return h.digest();
  }

 private:
  std::vector<unsigned char> buf_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(Kind::io, "cannot open checkpoint " + path.string());
    buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }

  template <class T>
  T get() {
    need(sizeof(T));
    std::array<unsigned char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), buf_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    pos_ += sizeof(T);
    return std::bit_cast<T>(bytes);
  }

  void expect_magic(std::uint8_t kind) {
    need(sizeof kMagic + 1);
    if (std::memcmp(buf_.data(), kMagic, sizeof kMagic) != 0) {
      throw CheckpointError(Kind::corrupt_header, path_.string() + ": bad magic");
    }
    pos_ = sizeof kMagic;
    const auto k = get<std::uint8_t>();
    if (k != kind) {
      throw CheckpointError(Kind::corrupt_header,
                            path_.string() + ": wrong checkpoint kind '" +
                                std::string(1, static_cast<char>(k)) + "'");
    }
  }

  void get_doubles(std::span<double> out) {
    need(out.size() * sizeof(double));
    for (double& d : out) d = get<double>();
  }

  void expect_checksum() {
    Fnv1a h;
    h.update(std::as_bytes(std::span(buf_.data(), pos_)));
    const std::uint64_t computed = h.digest();
    if (get<std::uint64_t>() != computed) {
      throw CheckpointError(Kind::corrupt_header, path_.string() + ": checksum mismatch");
    }
    if (pos_ != buf_.size()) {
      throw CheckpointError(Kind::corrupt_header, path_.string() + ": trailing bytes");
    }
  }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) {
      throw CheckpointError(Kind::corrupt_header, path_.string() + ": truncated checkpoint");
    }
  }

  std::filesystem::path path_;
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

void put_dims(Writer& w, const ModelDims& d) {
  for (std::size_t v : {d.vocab, d.window, d.embed, d.hidden, static_cast<std::size_t>(d.pad)}) {
    w.put(static_cast<std::uint32_t>(v));
  }
}

ModelDims get_dims(Reader& r) {
  ModelDims d;
  d.vocab = r.get<std::uint32_t>();
  d.window = r.get<std::uint32_t>();
  d.embed = r.get<std::uint32_t>();
  d.hidden = r.get<std::uint32_t>();
  d.pad = r.get<std::uint32_t>();
  return d;
}

void check_vocab(std::uint64_t stored, const Vocabulary& vocab, const std::filesystem::path& path) {
  if (stored != vocab.content_hash()) {
    throw CheckpointError(Kind::hash_mismatch,
                          path.string() + ": vocabulary hash " + hex64(stored) +
                              " does not match " + hex64(vocab.content_hash()));
  }
}

std::uint64_t get_count(Reader& r, std::size_t expected, const std::filesystem::path& path) {
  const auto count = r.get<std::uint64_t>();
  if (count != expected) {
    throw CheckpointError(Kind::dimension_mismatch,
                          path.string() + ": parameter count " + std::to_string(count) +
                              " does not match dims (" + std::to_string(expected) + ")");
  }
  return count;
}

}  // namespace

std::uint64_t save_checkpoint(const ModelParams& params, const Vocabulary& vocab,
                              const std::filesystem::path& path) {
  params.validate();
  Writer w;
  w.put_bytes(kMagic, sizeof kMagic);
  w.put(kModelKind);
  w.put(vocab.content_hash());
  put_dims(w, params.dims);
  w.put(static_cast<std::uint64_t>(params.parameter_count()));
  for (auto t : params.tensors()) w.put_doubles(t);
  w.put_checksum();
  return w.write(path);
}

std::uint64_t save_checkpoint(const AdapterDelta& adapter, const ModelDims& dims,
                              const Vocabulary& vocab, std::uint64_t base_hash,
                              const std::filesystem::path& path) {
  adapter.validate(dims);
  Writer w;
  w.put_bytes(kMagic, sizeof kMagic);
  w.put(kAdapterKind);
  w.put(vocab.content_hash());
  w.put(base_hash);
  put_dims(w, dims);
  w.put(static_cast<std::uint32_t>(adapter.rank));
  w.put(adapter.scale);
  w.put(static_cast<std::uint64_t>(adapter.parameter_count()));
  for (auto t : adapter.tensors()) w.put_doubles(t);
  w.put_checksum();
  return w.write(path);
}

ModelParams load_model_checkpoint(const std::filesystem::path& path, const Vocabulary& vocab) {
  Reader r(path);
  r.expect_magic(kModelKind);
  const auto vhash = r.get<std::uint64_t>();
  const ModelDims dims = get_dims(r);
  if (dims.vocab == 0 || dims.window == 0 || dims.embed == 0 || dims.hidden == 0 ||
      dims.window > 4096 || dims.embed > 65536 || dims.hidden > 65536 || dims.vocab > (1u << 24)) {
    throw CheckpointError(Kind::corrupt_header, path.string() + ": implausible dims");
  }
  ModelParams params = ModelParams::zeros(dims);
  get_count(r, params.parameter_count(), path);
  for (auto t : params.tensors()) r.get_doubles(t);
  r.expect_checksum();
  check_vocab(vhash, vocab, path);
  if (dims.vocab != vocab.size() || dims.pad != vocab.pad()) {
    throw CheckpointError(Kind::dimension_mismatch,
                          path.string() + ": model vocabulary size does not match vocabulary");
  }
  return params;
}

AdapterDelta load_adapter_checkpoint(const std::filesystem::path& path, const Vocabulary& vocab,
                                     const ModelDims& expected, std::uint64_t base_hash) {
  Reader r(path);
  r.expect_magic(kAdapterKind);
  const auto vhash = r.get<std::uint64_t>();
  const auto stored_base = r.get<std::uint64_t>();
  const ModelDims dims = get_dims(r);
  const auto rank = r.get<std::uint32_t>();
  const auto scale = r.get<double>();
  if (!(dims == expected)) {
    throw CheckpointError(Kind::dimension_mismatch,
                          path.string() + ": adapter dims do not match base model");
  }
  if (rank == 0 || rank >= std::min({dims.hidden, dims.input(), dims.vocab})) {
    throw CheckpointError(Kind::dimension_mismatch, path.string() + ": invalid adapter rank");
  }
  AdapterDelta adapter = AdapterDelta::zeros(dims, rank, scale);
  get_count(r, adapter.parameter_count(), path);
  for (auto t : adapter.tensors()) r.get_doubles(t);
  r.expect_checksum();
  check_vocab(vhash, vocab, path);
  if (stored_base != base_hash) {
    throw CheckpointError(Kind::hash_mismatch,
                          path.string() + ": adapter was trained on base " + hex64(stored_base) +
                              ", not " + hex64(base_hash));
  }
  return adapter;
}

std::uint64_t file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(Kind::io, "cannot open " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Fnv1a h;
  h.update(std::as_bytes(std::span(buf)));
  return h.digest();
}

}  // namespace cope
