#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace sdfrecon {

inline constexpr int kVersionMajor = 0;
inline constexpr int kVersionMinor = 1;
inline constexpr int kVersionPatch = 0;
inline constexpr const char* kVersionString = "0.1.0";

using Vec2d = Eigen::Vector2d;
using Vec3d = Eigen::Vector3d;
using Mat3d = Eigen::Matrix3d;
using Mat4d = Eigen::Matrix4d;

template <class T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Process exit codes, also used to classify thrown errors.
// 0 success, 1 usage, 2 data, 3 numerical failure.
enum class ErrorKind : int { Usage = 1, Data = 2, Numeric = 3 };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }
    int exit_code() const { return static_cast<int>(kind_); }

private:
    ErrorKind kind_;
};

struct UsageError : Error {
    explicit UsageError(const std::string& msg) : Error(ErrorKind::Usage, msg) {}
};
struct DataError : Error {
    explicit DataError(const std::string& msg) : Error(ErrorKind::Data, msg) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(ErrorKind::Numeric, msg) {}
};

using Rng = std::mt19937_64;

// Derive an independent sub-stream from a master seed. Keeps dataset
// generation, batch sampling, init, etc. decoupled so toggling one feature
// does not shift the random numbers seen by another.
inline Rng make_rng(uint64_t seed, uint64_t stream) {
    std::seed_seq seq{seed, stream ^ 0x9e3779b97f4a7c15ull};
    return Rng(seq);
}

inline int hardware_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

inline void set_num_threads(int n) {
    if (n < 1) n = 1;
#ifdef _OPENMP
    omp_set_num_threads(n);
#endif
    Eigen::setNbThreads(n);
}

// Static-schedule parallel map over [begin, end). Bodies must be independent;
// results are deterministic regardless of thread count.
template <class F>
void parallel_for(std::int64_t begin, std::int64_t end, F&& body) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t i = begin; i < end; ++i) body(i);
}

}  // namespace sdfrecon
