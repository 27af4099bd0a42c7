#include "bingo/membank.hpp"

#include <cmath>

#include "bingo/rng.hpp"

namespace bingo {

MemoryBank::MemoryBank(std::size_t capacity, std::size_t dim) : rows_(capacity, dim) {
  if (capacity < 1 || dim < 1) {
    throw InvariantError("MemoryBank: capacity and dim must be >= 1");
  }
}

MemoryBank MemoryBank::random_unit(std::size_t capacity, std::size_t dim,
                                   std::uint64_t seed) {
  MemoryBank bank(capacity, dim);
  for (std::size_t i = 0; i < capacity; ++i) {
    Rng rng = keyed_rng(seed, 0xba4bULL, i);
    auto row = bank.rows_.row(i);
    double nsq = 0.0;
    do {
      nsq = 0.0;
      for (double& v : row) {
        v = rng.next_normal();
        nsq += v * v;
      }
    } while (nsq < 1e-12);
    double nrm = std::sqrt(nsq);
    for (double& v : row) v /= nrm;
  }
  bank.filled_ = capacity;
  return bank;
}

void MemoryBank::enqueue_batch(const Matrix& keys) {
  if (keys.cols != dim()) {
    throw InvariantError("enqueue_batch: key dim " + std::to_string(keys.cols) +
                         " != bank dim " + std::to_string(dim()));
  }
  if (keys.rows == 0 || capacity() % keys.rows != 0) {
    throw InvariantError("enqueue_batch: batch size " + std::to_string(keys.rows) +
                         " must divide capacity " + std::to_string(capacity()));
  }
  for (std::size_t i = 0; i < keys.rows; ++i) {
    double nrm = norm(keys.row(i));
    if (std::abs(nrm - 1.0) > 1e-5) {
      throw InvariantError("enqueue_batch: key row " + std::to_string(i) +
                           " has norm " + std::to_string(nrm) + ", want unit");
    }
  }
  for (std::size_t i = 0; i < keys.rows; ++i) {
    auto dst = rows_.row(cursor_);
    auto src = keys.row(i);
    std::copy(src.begin(), src.end(), dst.begin());
    cursor_ = (cursor_ + 1) % capacity();
  }
  filled_ = std::min(capacity(), filled_ + keys.rows);
}

Matrix MemoryBank::negatives_view() const {
  if (filled_ == 0) throw InvariantError("negatives_view: bank is empty");
  Matrix out(filled_, dim());
  std::copy(rows_.data.begin(),
            rows_.data.begin() + static_cast<std::ptrdiff_t>(filled_ * dim()),
            out.data.begin());
  return out;
}

}  // namespace bingo
