#pragma once

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace deer {

// ---------------------------------------------------------------------------
// Error taxonomy. These map one-to-one onto the failure modes the library
// reports: shape mismatches, bad configuration, collapsed geometry, bad call
// sequences, and malformed external input.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct DegenerateRegionError : Error {
  using Error::Error;
};

struct UsageError : Error {
  using Error::Error;
};

struct InputError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// 2-D point. Geometry is always double precision regardless of the tensor
// scalar type.
// ---------------------------------------------------------------------------

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2() = default;
  Vec2(double x_, double y_) : x(x_), y(y_) {}

  Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double dot(const Vec2& o) const { return x * o.x + y * o.y; }
  double cross(const Vec2& o) const { return x * o.y - y * o.x; }
  double norm() const { return std::sqrt(x * x + y * y); }
};

inline Vec2 operator*(double s, const Vec2& v) { return v * s; }

// ---------------------------------------------------------------------------
// Deterministic RNG. std::mt19937_64 state transitions are pinned by the
// standard; the distributions below are hand-rolled so streams are identical
// across standard library implementations.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // uniform in [0, 1)
  double uniform01() { return double(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * uniform01(); }

  // uniform integer in [0, n)
  int64_t uniform_int(int64_t n) {
    if (n <= 0) throw UsageError("uniform_int: n must be positive");
    return int64_t(eng_() % uint64_t(n));
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u = 0.0, v = 0.0, s = 0.0;
    do {
      u = uniform(-1.0, 1.0);
      v = uniform(-1.0, 1.0);
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    has_spare_ = true;
    return u * m;
  }

  // Stable derived stream: lets workers draw independent seeds from one root.
  uint64_t fork(uint64_t salt) {
    uint64_t x = eng_() ^ (salt * 0x9e3779b97f4a7c15ull);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    return x;
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Thread pool for forward/backward kernels. Work is split into one contiguous
// chunk per worker, so every output element is written by exactly one thread
// and results are bit-identical for a fixed thread count. Default is one
// thread.
// ---------------------------------------------------------------------------

class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  int threads() const { return num_threads_; }

  void set_threads(int n) {
    if (n < 1) n = 1;
    std::lock_guard<std::mutex> run_lock(run_mutex_);
    stop_workers();
    num_threads_ = n;
    start_workers();
  }

  // fn(begin, end) over [0, n) split into contiguous chunks.
  void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    if (num_threads_ == 1 || n < 2) {
      fn(0, n);
      return;
    }
    std::lock_guard<std::mutex> run_lock(run_mutex_);
    int workers = int(workers_.size());
    int chunks = std::min<int64_t>(workers + 1, n);
    int64_t base = n / chunks, rem = n % chunks;
    {
      std::unique_lock<std::mutex> lk(mutex_);
      task_ = &fn;
      task_n_ = n;
      task_chunks_ = chunks;
      pending_.store(chunks - 1, std::memory_order_relaxed);
      ++generation_;
    }
    cv_.notify_all();
    // chunk 0 runs on the calling thread
    int64_t b0 = 0, e0 = base + (0 < rem ? 1 : 0);
    fn(b0, e0);
    std::unique_lock<std::mutex> lk(mutex_);
    done_cv_.wait(lk, [&] { return pending_.load(std::memory_order_acquire) == 0; });
    task_ = nullptr;
  }

  ~ThreadPool() { stop_workers(); }

 private:
  ThreadPool() { start_workers(); }

  void start_workers() {
    shutdown_ = false;
    for (int i = 1; i < num_threads_; ++i) {
      workers_.emplace_back([this, i] { worker_loop(i); });
    }
  }

  void stop_workers() {
    {
      std::lock_guard<std::mutex> lk(mutex_);
      shutdown_ = true;
      ++generation_;
    }
    cv_.notify_all();
    for (auto& t : workers_) t.join();
    workers_.clear();
  }

  void worker_loop(int idx) {
    uint64_t seen = 0;
    while (true) {
      const std::function<void(int64_t, int64_t)>* task = nullptr;
      int64_t n = 0;
      int chunks = 0;
      {
        std::unique_lock<std::mutex> lk(mutex_);
        cv_.wait(lk, [&] { return generation_ != seen; });
        seen = generation_;
        if (shutdown_) return;
        task = task_;
        n = task_n_;
        chunks = task_chunks_;
      }
      if (task != nullptr && idx < chunks) {
        int64_t base = n / chunks, rem = n % chunks;
        int64_t b = idx * base + std::min<int64_t>(idx, rem);
        int64_t e = b + base + (idx < rem ? 1 : 0);
        (*task)(b, e);
      }
      if (task != nullptr && idx < chunks) {
        if (pending_.fetch_sub(1, std::memory_order_acq_rel) == 1) {
          std::lock_guard<std::mutex> lk(mutex_);
          done_cv_.notify_all();
        }
      }
    }
  }

  std::vector<std::thread> workers_;
  std::mutex mutex_;
  std::mutex run_mutex_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  const std::function<void(int64_t, int64_t)>* task_ = nullptr;
  int64_t task_n_ = 0;
  int task_chunks_ = 0;
  std::atomic<int> pending_{0};
  uint64_t generation_ = 0;
  bool shutdown_ = false;
  int num_threads_ = 1;
};

inline void set_num_threads(int n) { ThreadPool::instance().set_threads(n); }
inline int num_threads() { return ThreadPool::instance().threads(); }

inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  ThreadPool::instance().parallel_for(n, fn);
}

inline int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

}  // namespace deer
