#pragma once

#include <cstdint>

#include "bingo/matrix.hpp"

namespace bingo {

// Fixed-capacity FIFO queue of unit-norm negative keys. Single writer; reads
// take immutable snapshots.
class MemoryBank {
 public:
  MemoryBank(std::size_t capacity, std::size_t dim);

  // Bank pre-filled with seeded random unit keys so the loss denominator is
  // well-defined before the first enqueue.
  static MemoryBank random_unit(std::size_t capacity, std::size_t dim, std::uint64_t seed);

  // Writes B keys at the cursor, advancing modulo capacity; B must divide
  // capacity and rows must be unit-norm.
  void enqueue_batch(const Matrix& keys);

  // Snapshot of the filled rows in storage order.
  Matrix negatives_view() const;

  std::size_t capacity() const { return rows_.rows; }
  std::size_t dim() const { return rows_.cols; }
  std::size_t filled() const { return filled_; }
  std::size_t write_cursor() const { return cursor_; }

 private:
  Matrix rows_;
  std::size_t cursor_ = 0;
  std::size_t filled_ = 0;
};

}  // namespace bingo
