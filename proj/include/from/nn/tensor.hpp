#pragma once

#include <cassert>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace from::nn {

// 64-byte-aligned allocator for numeric buffers. SIMD kernels that peel to an
// alignment boundary round differently depending on where a buffer lands in
// memory; pinning every tensor to the same alignment keeps results
// bit-identical across allocations of the same computation.
template <class T>
struct AlignedAlloc {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAlloc() = default;
  template <class U>
  AlignedAlloc(const AlignedAlloc<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(
        ::operator new(n * sizeof(T), std::align_val_t(kAlign)));
  }
  void deallocate(T* p, std::size_t) noexcept {
    ::operator delete(p, std::align_val_t(kAlign));
  }
  template <class U>
  bool operator==(const AlignedAlloc<U>&) const noexcept {
    return true;
  }
  template <class U>
  bool operator!=(const AlignedAlloc<U>&) const noexcept {
    return false;
  }
};

template <class T>
using AlignedVec = std::vector<T, AlignedAlloc<T>>;

// Dense row-major tensor, NCHW for 4-d. Value semantics throughout; copying a
// network deep-copies its parameters and caches.
template <class T>
struct Tensor {
  std::vector<int> shape;
  AlignedVec<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel(shape), T(0));
  }

  static std::size_t numel(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("negative tensor dim");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::size_t size() const { return data.size(); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  bool empty() const { return data.empty(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  T& at4(int n, int c, int h, int w) {
    return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) *
                    shape[3] +
                w];
  }
  const T& at4(int n, int c, int h, int w) const {
    return const_cast<Tensor*>(this)->at4(n, c, h, w);
  }
  T& at2(int n, int c) {
    return data[static_cast<std::size_t>(n) * shape[1] + c];
  }
  const T& at2(int n, int c) const {
    return const_cast<Tensor*>(this)->at2(n, c);
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }
  void zero() { fill(T(0)); }

  Tensor reshaped(std::vector<int> s) const {
    if (numel(s) != size()) throw std::invalid_argument("reshape size mismatch");
    Tensor out = *this;
    out.shape = std::move(s);
    return out;
  }

  Tensor& operator+=(const Tensor& other) {
    assert(size() == other.size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] += other.data[i];
    return *this;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.reserve(data.size());
    for (const T& v : data) out.data.push_back(static_cast<U>(v));
    return out;
  }
};

// Named handle on a parameter (or buffer) and its gradient slot.
template <class T>
struct ParamRef {
  std::string name;
  Tensor<T>* value = nullptr;
  Tensor<T>* grad = nullptr;   // null for non-trainable buffers
  bool trainable = true;
};

}  // namespace from::nn
