#include "doctest.h"

#include <cmath>
#include <set>

#include "bingo/data_io.hpp"
#include "bingo/rng.hpp"
#include "test_util.hpp"

using namespace bingo;
using bingo_test::TempDir;
using bingo_test::slurp;
using bingo_test::spit;

TEST_CASE("gen_blobs with zero noise repeats class centers exactly") {
  Dataset d = gen_blobs(20, 4, 5, 2.0, 0.0, 1);
  for (std::size_t i = 0; i < d.n; ++i) {
    std::size_t c = i % 5;
    CHECK(d.labels[i] == static_cast<std::int32_t>(c));
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(d.rows.at(i, j) == d.rows.at(c, j));
    }
  }
}

TEST_CASE("gen_blobs with one class labels everything zero") {
  Dataset d = gen_blobs(12, 3, 1, 1.0, 0.1, 2);
  for (auto l : d.labels) CHECK(l == 0);
}

TEST_CASE("well-separated blobs are 1-NN clean") {
  Dataset d = gen_blobs(300, 8, 5, 5.0, 0.2, 3, 0.0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.n; ++i) {
    double best = 1e300;
    std::size_t best_j = i;
    for (std::size_t j = 0; j < d.n; ++j) {
      if (j == i) continue;
      double dist = squared_distance(d.rows.row(i), d.rows.row(j));
      if (dist < best) {
        best = dist;
        best_j = j;
      }
    }
    if (d.labels[best_j] == d.labels[i]) ++correct;
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(d.n) > 0.99);
}

TEST_CASE("gen_blobs split is stratified and deterministic") {
  Dataset a = gen_blobs(100, 4, 10, 2.0, 0.3, 4, 0.2);
  Dataset b = gen_blobs(100, 4, 10, 2.0, 0.3, 4, 0.2);
  CHECK(a.split == b.split);
  CHECK(a.rows.data == b.rows.data);
  for (int c = 0; c < 10; ++c) {
    std::size_t val = 0;
    for (std::size_t i = 0; i < a.n; ++i) {
      if (a.labels[i] == c && a.split[i] == kSplitVal) ++val;
    }
    CHECK(val == 2);  // 10 per class, 20% val
  }
}

TEST_CASE("idx scaling maps bytes onto [0,1]") {
  TempDir tmp("idx");
  std::string payload;
  payload += std::string("\x00\x00\x08\x03", 4);
  payload += std::string("\x00\x00\x00\x01", 4);  // n=1
  payload += std::string("\x00\x00\x00\x02", 4);  // rows=2
  payload += std::string("\x00\x00\x00\x02", 4);  // cols=2
  payload += '\x00';
  payload += '\xff';
  payload += '\x00';
  payload += '\xff';
  spit(tmp.file("img.idx"), payload);
  Dataset d = load_idx(tmp.file("img.idx"));
  CHECK(d.n == 1);
  CHECK(d.input_dim == 4);
  CHECK(d.rows.data == std::vector<double>{0, 1, 0, 1});
}

TEST_CASE("idx writers and loaders are inverse") {
  TempDir tmp("idxrt");
  Dataset d = gen_blobs(17, 6, 3, 0.4, 0.05, 5, 0.0);
  for (double& v : d.rows.data) v = std::abs(v) > 1 ? 1.0 : std::abs(v);
  // quantize to exact byte grid so the round trip is lossless
  for (double& v : d.rows.data) v = std::round(v * 255.0) / 255.0;
  save_idx(d, tmp.file("x.idx"));
  save_idx_labels(d.labels, tmp.file("y.idx"));
  Dataset back = load_idx(tmp.file("x.idx"));
  CHECK(back.n == d.n);
  CHECK(back.input_dim == d.input_dim);
  for (std::size_t i = 0; i < d.rows.data.size(); ++i) {
    CHECK(back.rows.data[i] == doctest::Approx(d.rows.data[i]).epsilon(1e-12));
  }
  CHECK(load_idx_labels(tmp.file("y.idx")) == d.labels);
}

TEST_CASE("label/data count mismatch is a structured error") {
  Dataset d = gen_blobs(10, 3, 2, 1.0, 0.1, 6);
  CHECK_THROWS_WITH_AS(attach_labels(d, std::vector<std::int32_t>(7, 0)),
                       doctest::Contains("does not match"), InvariantError);
}

TEST_CASE("idx loader rejects bad magic, truncation, and dim overflow") {
  TempDir tmp("idxbad");
  std::string good;
  good += std::string("\x00\x00\x08\x03", 4);
  good += std::string("\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00\x02", 12);
  good += "ab";
  spit(tmp.file("ok.idx"), good);
  CHECK_NOTHROW(load_idx(tmp.file("ok.idx")));

  std::string bad_magic = good;
  bad_magic[3] = '\x01';
  spit(tmp.file("m.idx"), bad_magic);
  CHECK_THROWS_WITH_AS(load_idx(tmp.file("m.idx")), doctest::Contains("bad magic"),
                       InvariantError);

  std::string truncated = good.substr(0, good.size() - 1);
  spit(tmp.file("t.idx"), truncated);
  CHECK_THROWS_WITH_AS(load_idx(tmp.file("t.idx")), doctest::Contains("truncated"),
                       InvariantError);

  std::string overflow = good;
  overflow[4] = '\x7f';  // n becomes enormous
  overflow[8] = '\x7f';
  spit(tmp.file("o.idx"), overflow);
  CHECK_THROWS_WITH_AS(load_idx(tmp.file("o.idx")), doctest::Contains("overflow"),
                       InvariantError);
}

TEST_CASE("checkpoint round trip is byte-identical") {
  TempDir tmp("ckpt");
  EncoderSpec spec;
  spec.input_dim = 4;
  spec.hidden_dims = {5, 3};
  spec.proj_hidden_dim = 4;
  spec.embed_dim = 3;
  Checkpoint ckpt;
  ckpt.params = init_params(spec, 77, EncoderRole::Teacher);
  ckpt.config_fingerprint = 0xdeadbeef;
  ckpt.mode = "pretrain-teacher";
  ckpt.epochs = 12;
  ckpt.seed = 99;
  save_checkpoint(ckpt, tmp.file("a.ckpt"));
  Checkpoint loaded = load_checkpoint(tmp.file("a.ckpt"));
  CHECK(loaded.params.spec == ckpt.params.spec);
  CHECK(loaded.mode == ckpt.mode);
  CHECK(loaded.epochs == ckpt.epochs);
  CHECK(loaded.seed == ckpt.seed);
  CHECK(loaded.config_fingerprint == ckpt.config_fingerprint);
  CHECK(loaded.params.role == EncoderRole::Teacher);
  for (std::size_t l = 0; l < ckpt.params.weights.size(); ++l) {
    CHECK(loaded.params.weights[l].data == ckpt.params.weights[l].data);
    CHECK(loaded.params.biases[l] == ckpt.params.biases[l]);
  }
  save_checkpoint(loaded, tmp.file("b.ckpt"));
  CHECK(slurp(tmp.file("a.ckpt")) == slurp(tmp.file("b.ckpt")));
}

TEST_CASE("checkpoint corruption and truncation are detected") {
  TempDir tmp("ckptbad");
  EncoderSpec spec;
  spec.input_dim = 3;
  spec.hidden_dims = {};
  spec.proj_hidden_dim = 3;
  spec.embed_dim = 2;
  Checkpoint ckpt;
  ckpt.params = init_params(spec, 1);
  save_checkpoint(ckpt, tmp.file("c.ckpt"));

  std::string bytes = slurp(tmp.file("c.ckpt"));
  std::string corrupt = bytes;
  corrupt[40] = static_cast<char>(corrupt[40] ^ 0x01);  // payload byte
  spit(tmp.file("corrupt.ckpt"), corrupt);
  CHECK_THROWS_WITH_AS(load_checkpoint(tmp.file("corrupt.ckpt")),
                       doctest::Contains("checksum"), InvariantError);

  spit(tmp.file("empty.ckpt"), "");
  CHECK_THROWS_WITH_AS(load_checkpoint(tmp.file("empty.ckpt")),
                       doctest::Contains("truncated"), InvariantError);
}

TEST_CASE("embedding files quantize to f32 and renormalize on load") {
  TempDir tmp("emb");
  Rng rng = keyed_rng(8, 0);
  Matrix m(20, 6);
  for (std::size_t i = 0; i < m.rows; ++i) {
    double nsq = 0.0;
    for (std::size_t j = 0; j < m.cols; ++j) {
      m.at(i, j) = rng.next_normal();
      nsq += m.at(i, j) * m.at(i, j);
    }
    double nrm = std::sqrt(nsq);
    for (std::size_t j = 0; j < m.cols; ++j) m.at(i, j) /= nrm;
  }
  save_embeddings(m, tmp.file("e.bin"));
  LoadedEmbeddings loaded = load_embeddings(tmp.file("e.bin"));
  REQUIRE(loaded.rows.rows == m.rows);
  CHECK(loaded.max_renorm_delta <= 1e-6);
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    CHECK(std::abs(loaded.rows.data[i] - m.data[i]) <= 1e-6);
  }
  for (std::size_t i = 0; i < m.rows; ++i) {
    CHECK(std::abs(norm(loaded.rows.row(i)) - 1.0) <= 1e-12);
  }
}

TEST_CASE("dataset and label containers round trip") {
  TempDir tmp("ds");
  Dataset d = gen_blobs(25, 5, 5, 1.5, 0.2, 9, 0.2);
  save_dataset(d, tmp.file("d.bin"));
  save_labels(d.labels, tmp.file("l.bin"));
  Dataset back = load_dataset(tmp.file("d.bin"));
  CHECK(back.n == d.n);
  CHECK(back.split == d.split);
  for (std::size_t i = 0; i < d.rows.data.size(); ++i) {
    CHECK(std::abs(back.rows.data[i] - d.rows.data[i]) <= 1e-6);  // f32 payload
  }
  CHECK(load_labels(tmp.file("l.bin")) == d.labels);

  // writers are deterministic byte streams
  save_dataset(d, tmp.file("d2.bin"));
  CHECK(slurp(tmp.file("d.bin")) == slurp(tmp.file("d2.bin")));
}

TEST_CASE("fuzzed headers are rejected with structured errors") {
  TempDir tmp("fuzz");
  Dataset d = gen_blobs(6, 3, 2, 1.0, 0.1, 10);
  save_dataset(d, tmp.file("d.bin"));
  save_labels(d.labels, tmp.file("l.bin"));
  EncoderSpec spec;
  spec.input_dim = 3;
  spec.hidden_dims = {};
  spec.proj_hidden_dim = 2;
  spec.embed_dim = 2;
  Checkpoint ckpt;
  ckpt.params = init_params(spec, 2);
  save_checkpoint(ckpt, tmp.file("c.bin"));
  Matrix e(2, 2, {1, 0, 0, 1});
  save_embeddings(e, tmp.file("e.bin"));

  auto fuzz_all = [&tmp](const std::string& path, auto loader) {
    std::string bytes = slurp(path);
    std::size_t limit = std::min<std::size_t>(64, bytes.size());
    for (std::size_t off = 0; off < limit; ++off) {
      std::string mutated = bytes;
      mutated[off] = static_cast<char>(mutated[off] ^ 0xff);
      spit(tmp.file("fuzzed.bin"), mutated);
      CHECK_THROWS_AS(loader(tmp.file("fuzzed.bin")), Error);
    }
  };
  fuzz_all(tmp.file("d.bin"), [](const std::string& p) { return load_dataset(p); });
  fuzz_all(tmp.file("l.bin"), [](const std::string& p) { return load_labels(p); });
  fuzz_all(tmp.file("c.bin"), [](const std::string& p) { return load_checkpoint(p); });
  fuzz_all(tmp.file("e.bin"), [](const std::string& p) { return load_embeddings(p); });

  // idx headers carry no checksum; fuzz their header bytes only
  save_idx(d, tmp.file("x.idx"));
  std::string bytes = slurp(tmp.file("x.idx"));
  for (std::size_t off = 0; off < 16; ++off) {
    std::string mutated = bytes;
    mutated[off] = static_cast<char>(mutated[off] ^ 0xff);
    spit(tmp.file("x-fuzz.idx"), mutated);
    CHECK_THROWS_AS(load_idx(tmp.file("x-fuzz.idx")), Error);
  }
}
