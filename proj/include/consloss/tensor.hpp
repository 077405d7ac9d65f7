#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace consloss {

using Shape = std::vector<std::size_t>;

// Fixed 64-byte alignment keeps vectorized reductions over tensor buffers
// independent of where the heap happens to place them.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() noexcept = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <class U>
    friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
        return true;
    }
};

using TensorStorage = std::vector<double, AlignedAllocator<double>>;

std::string shape_string(const Shape& shape);

// Dense row-major array of doubles. Images are stored H x W x C.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    TensorStorage& storage() noexcept { return data_; }
    const TensorStorage& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    // Rank-3 access (y, x, channel).
    double& at(std::size_t y, std::size_t x, std::size_t c) noexcept {
        return data_[(y * shape_[1] + x) * shape_[2] + c];
    }
    double at(std::size_t y, std::size_t x, std::size_t c) const noexcept {
        return data_[(y * shape_[1] + x) * shape_[2] + c];
    }

    void fill(double value);
    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
    bool all_finite() const noexcept;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    TensorStorage data_;
};

// Integer class map, H x W.
struct LabelMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<int> ids;

    LabelMap() = default;
    LabelMap(std::size_t h, std::size_t w, int fill = 0) : height(h), width(w), ids(h * w, fill) {}

    int& operator()(std::size_t y, std::size_t x) noexcept { return ids[y * width + x]; }
    int operator()(std::size_t y, std::size_t x) const noexcept { return ids[y * width + x]; }
    std::size_t size() const noexcept { return ids.size(); }

    friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

// Seeded stream with platform-independent uniform and normal draws.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    double uniform();                       // [0, 1)
    double uniform(double lo, double hi);   // [lo, hi)
    double normal();                        // N(0, 1)
    std::size_t index(std::size_t n);       // [0, n)

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Mixes a seed with stream identifiers into an independent child seed.
std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> stream);

}  // namespace consloss
