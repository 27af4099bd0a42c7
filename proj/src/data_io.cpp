#include "bingo/data_io.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "bingo/rng.hpp"

namespace bingo {

namespace {

constexpr std::size_t kMaxElements = std::size_t{1} << 31;  // dim-overflow guard

void append_bytes(std::string& buf, const void* p, std::size_t len) {
  buf.append(static_cast<const char*>(p), len);
}

void put_u32(std::string& buf, std::uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  append_bytes(buf, b, 4);
}

void put_u64(std::string& buf, std::uint64_t v) {
  put_u32(buf, static_cast<std::uint32_t>(v & 0xffffffffULL));
  put_u32(buf, static_cast<std::uint32_t>(v >> 32));
}

void put_i32(std::string& buf, std::int32_t v) {
  put_u32(buf, static_cast<std::uint32_t>(v));
}

void put_f32(std::string& buf, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}

void put_f64(std::string& buf, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(buf, bits);
}

class ByteReader {
 public:
  ByteReader(const std::string& data, std::string what)
      : data_(data), what_(std::move(what)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i)
      v = (v << 8) | static_cast<std::uint8_t>(data_[pos_ + static_cast<std::size_t>(i)]);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t lo = u32();
    std::uint64_t hi = u32();
    return lo | (hi << 32);
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() {
    std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::string bytes(std::size_t len) {
    need(len);
    std::string s = data_.substr(pos_, len);
    pos_ += len;
    return s;
  }
  std::size_t pos() const { return pos_; }
  void expect_end() const {
    if (pos_ != data_.size()) {
      throw InvariantError(what_ + ": trailing bytes after payload");
    }
  }
  void need(std::size_t len) const {
    if (pos_ + len > data_.size()) {
      throw InvariantError(what_ + ": truncated (wanted " + std::to_string(len) +
                           " bytes at offset " + std::to_string(pos_) + ")");
    }
  }

 private:
  const std::string& data_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path, const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvariantError(what + ": cannot open " + path);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return data;
}

void atomic_write(const std::string& path, const std::string& payload) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InvariantError("cannot open " + tmp + " for writing");
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw InvariantError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

void seal_crc(std::string& buf) {
  put_u32(buf, crc32_bytes(buf.data(), buf.size()));
}

// Validates the CRC trailer and returns the payload without it.
std::string check_crc(std::string data, const std::string& what) {
  if (data.size() < 4) throw InvariantError(what + ": truncated (no checksum)");
  std::string payload = data.substr(0, data.size() - 4);
  std::uint32_t stored = 0;
  for (int i = 3; i >= 0; --i) {
    stored = (stored << 8) |
             static_cast<std::uint8_t>(data[data.size() - 4 + static_cast<std::size_t>(i)]);
  }
  if (stored != crc32_bytes(payload.data(), payload.size())) {
    throw InvariantError(what + ": checksum mismatch");
  }
  return payload;
}

void expect_magic(ByteReader& r, const char* magic, const std::string& what) {
  std::string m = r.bytes(4);
  if (m != magic) throw InvariantError(what + ": bad magic");
}

void expect_version(ByteReader& r, std::uint32_t want, const std::string& what) {
  std::uint32_t v = r.u32();
  if (v != want) {
    throw InvariantError(what + ": unknown version " + std::to_string(v));
  }
}

std::uint32_t be_u32(const std::string& data, std::size_t pos, const std::string& what) {
  if (pos + 4 > data.size()) throw InvariantError(what + ": truncated header");
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i)
    v = (v << 8) | static_cast<std::uint8_t>(data[pos + i]);
  return v;
}

}  // namespace

std::uint32_t crc32_bytes(const void* data, std::size_t len) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, static_cast<const Bytef*>(data), static_cast<uInt>(len)));
}

std::vector<std::size_t> Dataset::split_indices(std::uint8_t tag) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n; ++i)
    if (split[i] == tag) out.push_back(i);
  return out;
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out;
  out.n = indices.size();
  out.input_dim = input_dim;
  out.rows = Matrix(out.n, input_dim);
  out.split.resize(out.n);
  if (has_labels()) out.labels.resize(out.n);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::size_t src = indices[i];
    std::copy(rows.row(src).begin(), rows.row(src).end(), out.rows.row(i).begin());
    out.split[i] = split[src];
    if (has_labels()) out.labels[i] = labels[src];
  }
  return out;
}

void Dataset::validate() const {
  if (rows.rows != n || rows.cols != input_dim || split.size() != n) {
    throw InvariantError("Dataset: inconsistent field sizes");
  }
  if (!labels.empty() && labels.size() != n) {
    throw InvariantError("Dataset: labels length " + std::to_string(labels.size()) +
                         " != n " + std::to_string(n));
  }
  for (double v : rows.data) {
    if (!std::isfinite(v)) throw InvariantError("Dataset: non-finite feature value");
  }
}

Dataset gen_blobs(std::size_t n, std::size_t dim, std::size_t classes, double class_sep,
                  double noise, std::uint64_t seed, double val_fraction) {
  if (classes < 1 || classes > n) throw InvariantError("gen_blobs: need 1 <= classes <= n");
  if (dim < 2) throw InvariantError("gen_blobs: dim must be >= 2");
  if (noise < 0.0) throw InvariantError("gen_blobs: noise must be >= 0");
  if (val_fraction < 0.0 || val_fraction >= 1.0) {
    throw InvariantError("gen_blobs: val_fraction must lie in [0, 1)");
  }
  Matrix centers(classes, dim);
  for (std::size_t c = 0; c < classes; ++c) {
    Rng rng = keyed_rng(seed, 0xb10b5ULL, c);
    double nsq = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      centers.at(c, j) = rng.next_normal();
      nsq += centers.at(c, j) * centers.at(c, j);
    }
    double nrm = std::sqrt(nsq);
    for (std::size_t j = 0; j < dim; ++j) centers.at(c, j) *= class_sep / nrm;
  }
  Dataset d;
  d.n = n;
  d.input_dim = dim;
  d.rows = Matrix(n, dim);
  d.labels.resize(n);
  d.split.assign(n, kSplitTrain);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = i % classes;
    d.labels[i] = static_cast<std::int32_t>(c);
    Rng rng = keyed_rng(seed, 0x1075ULL, i);
    for (std::size_t j = 0; j < dim; ++j) {
      d.rows.at(i, j) = centers.at(c, j) + noise * rng.next_normal();
    }
  }
  // Per-class val tail keeps the split stratified and seed-deterministic.
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = c; i < n; i += classes) members.push_back(i);
    std::size_t val_count =
        static_cast<std::size_t>(std::llround(static_cast<double>(members.size()) * val_fraction));
    for (std::size_t k = members.size() - val_count; k < members.size(); ++k) {
      d.split[members[k]] = kSplitVal;
    }
  }
  return d;
}

Dataset load_idx(const std::string& path) {
  const std::string what = "idx data file";
  std::string data = read_file(path, what);
  std::uint32_t magic = be_u32(data, 0, what);
  if (magic != 0x00000803u) throw InvariantError(what + ": bad magic");
  std::uint64_t n = be_u32(data, 4, what);
  std::uint64_t rows = be_u32(data, 8, what);
  std::uint64_t cols = be_u32(data, 12, what);
  std::uint64_t count = n * rows * cols;
  if (rows == 0 || cols == 0 || count > kMaxElements) {
    throw InvariantError(what + ": dimension overflow (" + std::to_string(n) + "x" +
                         std::to_string(rows) + "x" + std::to_string(cols) + ")");
  }
  if (data.size() != 16 + count) {
    throw InvariantError(what + ": truncated payload (header promises " +
                         std::to_string(count) + " bytes, file holds " +
                         std::to_string(data.size() - std::min<std::size_t>(16, data.size())) +
                         ")");
  }
  Dataset d;
  d.n = n;
  d.input_dim = rows * cols;
  d.rows = Matrix(d.n, d.input_dim);
  for (std::size_t i = 0; i < count; ++i) {
    d.rows.data[i] = static_cast<double>(static_cast<std::uint8_t>(data[16 + i])) / 255.0;
  }
  d.split.assign(d.n, kSplitTrain);
  return d;
}

std::vector<std::int32_t> load_idx_labels(const std::string& path) {
  const std::string what = "idx label file";
  std::string data = read_file(path, what);
  std::uint32_t magic = be_u32(data, 0, what);
  if (magic != 0x00000801u) throw InvariantError(what + ": bad magic");
  std::uint64_t n = be_u32(data, 4, what);
  if (n > kMaxElements) throw InvariantError(what + ": dimension overflow");
  if (data.size() != 8 + n) {
    throw InvariantError(what + ": truncated payload");
  }
  std::vector<std::int32_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<std::int32_t>(static_cast<std::uint8_t>(data[8 + i]));
  }
  return labels;
}

void attach_labels(Dataset& data, std::vector<std::int32_t> labels) {
  if (labels.size() != data.n) {
    throw InvariantError("label count " + std::to_string(labels.size()) +
                         " does not match dataset size " + std::to_string(data.n));
  }
  data.labels = std::move(labels);
}

void save_idx(const Dataset& data, const std::string& path) {
  std::string buf;
  char magic[4] = {0, 0, 8, 3};
  append_bytes(buf, magic, 4);
  auto put_be = [&buf](std::uint32_t v) {
    char b[4] = {static_cast<char>((v >> 24) & 0xff), static_cast<char>((v >> 16) & 0xff),
                 static_cast<char>((v >> 8) & 0xff), static_cast<char>(v & 0xff)};
    append_bytes(buf, b, 4);
  };
  put_be(static_cast<std::uint32_t>(data.n));
  put_be(1);
  put_be(static_cast<std::uint32_t>(data.input_dim));
  for (double v : data.rows.data) {
    double clamped = std::min(1.0, std::max(0.0, v));
    buf.push_back(static_cast<char>(static_cast<std::uint8_t>(std::llround(clamped * 255.0))));
  }
  atomic_write(path, buf);
}

void save_idx_labels(const std::vector<std::int32_t>& labels, const std::string& path) {
  std::string buf;
  char magic[4] = {0, 0, 8, 1};
  append_bytes(buf, magic, 4);
  char b[4] = {static_cast<char>((labels.size() >> 24) & 0xff),
               static_cast<char>((labels.size() >> 16) & 0xff),
               static_cast<char>((labels.size() >> 8) & 0xff),
               static_cast<char>(labels.size() & 0xff)};
  append_bytes(buf, b, 4);
  for (std::int32_t v : labels) {
    if (v < 0 || v > 255) throw InvariantError("save_idx_labels: label outside byte range");
    buf.push_back(static_cast<char>(static_cast<std::uint8_t>(v)));
  }
  atomic_write(path, buf);
}

void save_dataset(const Dataset& data, const std::string& path) {
  data.validate();
  std::string buf;
  append_bytes(buf, "BNGD", 4);
  put_u32(buf, 1);
  put_u32(buf, static_cast<std::uint32_t>(data.n));
  put_u32(buf, static_cast<std::uint32_t>(data.input_dim));
  for (double v : data.rows.data) put_f32(buf, static_cast<float>(v));
  for (std::uint8_t tag : data.split) buf.push_back(static_cast<char>(tag));
  seal_crc(buf);
  atomic_write(path, buf);
}

Dataset load_dataset(const std::string& path) {
  const std::string what = "dataset file";
  std::string payload = check_crc(read_file(path, what), what);
  ByteReader r(payload, what);
  expect_magic(r, "BNGD", what);
  expect_version(r, 1, what);
  std::uint64_t n = r.u32();
  std::uint64_t dim = r.u32();
  if (n * dim > kMaxElements) throw InvariantError(what + ": dimension overflow");
  Dataset d;
  d.n = n;
  d.input_dim = dim;
  d.rows = Matrix(n, dim);
  for (std::size_t i = 0; i < n * dim; ++i) {
    double v = static_cast<double>(r.f32());
    if (!std::isfinite(v)) throw InvariantError(what + ": non-finite feature value");
    d.rows.data[i] = v;
  }
  d.split.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint8_t tag = r.u8();
    if (tag != kSplitTrain && tag != kSplitVal) {
      throw InvariantError(what + ": unknown split tag " + std::to_string(tag));
    }
    d.split[i] = tag;
  }
  r.expect_end();
  return d;
}

void save_labels(const std::vector<std::int32_t>& labels, const std::string& path) {
  std::string buf;
  append_bytes(buf, "BNGL", 4);
  put_u32(buf, 1);
  put_u32(buf, static_cast<std::uint32_t>(labels.size()));
  for (std::int32_t v : labels) put_i32(buf, v);
  seal_crc(buf);
  atomic_write(path, buf);
}

std::vector<std::int32_t> load_labels(const std::string& path) {
  const std::string what = "label file";
  std::string payload = check_crc(read_file(path, what), what);
  ByteReader r(payload, what);
  expect_magic(r, "BNGL", what);
  expect_version(r, 1, what);
  std::uint64_t n = r.u32();
  if (n > kMaxElements) throw InvariantError(what + ": dimension overflow");
  std::vector<std::int32_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = r.i32();
  r.expect_end();
  return labels;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  ckpt.params.validate();
  std::string buf;
  append_bytes(buf, "BNGC", 4);
  put_u32(buf, ckpt.version);
  buf.push_back(static_cast<char>(ckpt.params.role));
  const EncoderSpec& spec = ckpt.params.spec;
  put_u32(buf, static_cast<std::uint32_t>(spec.input_dim));
  put_u32(buf, static_cast<std::uint32_t>(spec.hidden_dims.size()));
  for (std::size_t h : spec.hidden_dims) put_u32(buf, static_cast<std::uint32_t>(h));
  put_u32(buf, static_cast<std::uint32_t>(spec.proj_hidden_dim));
  put_u32(buf, static_cast<std::uint32_t>(spec.embed_dim));
  put_u32(buf, static_cast<std::uint32_t>(ckpt.params.weights.size()));
  for (std::size_t l = 0; l < ckpt.params.weights.size(); ++l) {
    const Matrix& w = ckpt.params.weights[l];
    put_u32(buf, static_cast<std::uint32_t>(w.rows));
    put_u32(buf, static_cast<std::uint32_t>(w.cols));
    // f64 blocks: the checkpoint invariant is bit-level save/load identity
    for (double v : w.data) put_f64(buf, v);
    for (double v : ckpt.params.biases[l]) put_f64(buf, v);
  }
  put_u32(buf, ckpt.config_fingerprint);
  if (ckpt.mode.size() > 255) throw InvariantError("save_checkpoint: mode string too long");
  buf.push_back(static_cast<char>(ckpt.mode.size()));
  append_bytes(buf, ckpt.mode.data(), ckpt.mode.size());
  put_u32(buf, ckpt.epochs);
  put_u64(buf, ckpt.seed);
  seal_crc(buf);
  atomic_write(path, buf);
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string what = "checkpoint file";
  std::string payload = check_crc(read_file(path, what), what);
  ByteReader r(payload, what);
  expect_magic(r, "BNGC", what);
  Checkpoint ckpt;
  ckpt.version = 1;
  expect_version(r, 1, what);
  std::uint8_t role = r.u8();
  if (role > 2) throw InvariantError(what + ": unknown encoder role");
  ckpt.params.role = static_cast<EncoderRole>(role);
  EncoderSpec& spec = ckpt.params.spec;
  spec.input_dim = r.u32();
  std::uint32_t n_hidden = r.u32();
  if (n_hidden > 64) throw InvariantError(what + ": implausible hidden layer count");
  for (std::uint32_t i = 0; i < n_hidden; ++i) spec.hidden_dims.push_back(r.u32());
  spec.proj_hidden_dim = r.u32();
  spec.embed_dim = r.u32();
  std::uint32_t n_layers = r.u32();
  if (n_layers != spec.layer_count()) {
    throw InvariantError(what + ": layer count disagrees with spec");
  }
  for (std::uint32_t l = 0; l < n_layers; ++l) {
    std::uint64_t rows = r.u32();
    std::uint64_t cols = r.u32();
    if (rows * cols > kMaxElements) throw InvariantError(what + ": dimension overflow");
    Matrix w(rows, cols);
    for (double& v : w.data) v = r.f64();
    std::vector<double> b(cols);
    for (double& v : b) v = r.f64();
    ckpt.params.weights.push_back(std::move(w));
    ckpt.params.biases.push_back(std::move(b));
  }
  ckpt.config_fingerprint = r.u32();
  std::size_t mode_len = r.u8();
  ckpt.mode = r.bytes(mode_len);
  ckpt.epochs = r.u32();
  ckpt.seed = r.u64();
  r.expect_end();
  ckpt.params.validate();
  return ckpt;
}

void save_embeddings(const Matrix& unit_rows, const std::string& path) {
  std::string buf;
  append_bytes(buf, "BNGE", 4);
  put_u32(buf, 1);
  put_u32(buf, static_cast<std::uint32_t>(unit_rows.rows));
  put_u32(buf, static_cast<std::uint32_t>(unit_rows.cols));
  for (double v : unit_rows.data) put_f32(buf, static_cast<float>(v));
  seal_crc(buf);
  atomic_write(path, buf);
}

LoadedEmbeddings load_embeddings(const std::string& path) {
  const std::string what = "embedding file";
  std::string payload = check_crc(read_file(path, what), what);
  ByteReader r(payload, what);
  expect_magic(r, "BNGE", what);
  expect_version(r, 1, what);
  std::uint64_t n = r.u32();
  std::uint64_t d = r.u32();
  if (n * d > kMaxElements) throw InvariantError(what + ": dimension overflow");
  LoadedEmbeddings out;
  out.rows = Matrix(n, d);
  for (std::size_t i = 0; i < n * d; ++i) {
    double v = static_cast<double>(r.f32());
    if (!std::isfinite(v)) throw InvariantError(what + ": non-finite value");
    out.rows.data[i] = v;
  }
  r.expect_end();
  for (std::size_t i = 0; i < n; ++i) {
    auto row = out.rows.row(i);
    double nrm = norm(row);
    if (nrm < kDegenerateRowNorm) {
      throw InvariantError(what + ": row " + std::to_string(i) + " has near-zero norm");
    }
    out.max_renorm_delta = std::max(out.max_renorm_delta, std::abs(nrm - 1.0));
    for (double& v : row) v /= nrm;
  }
  return out;
}

}  // namespace bingo
