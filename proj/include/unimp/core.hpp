#pragma once

#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace unimp {

// ----------------------------- errors -----------------------------

struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IndexError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ----------------------------- shapes -----------------------------

using Shape = std::vector<int>;

inline long long numel(const Shape& s) {
    long long n = 1;
    for (int e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

// ----------------------------- hashing -----------------------------

// FNV-1a, used for config/vocab/manifest fingerprints.
inline uint64_t fnv1a(const void* data, size_t len, uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 1469598103934665603ull) {
    return fnv1a(s.data(), s.size(), h);
}

inline uint64_t fnv1a(char c, uint64_t h) {
    return fnv1a(&c, 1, h);
}

inline std::string hash_hex(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

// ----------------------------- strings -----------------------------

inline std::string join(const std::vector<std::string>& parts, const std::string& sep) {
    std::string out;
    for (size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

// ----------------------------- files -----------------------------

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
}

// ----------------------------- thread pool -----------------------------

// Static-partition fork/join pool. Each index range is computed by exactly
// one thread, so results do not depend on scheduling.
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool(default_worker_count());
        return pool;
    }

    explicit ThreadPool(int workers) {
        workers = std::max(0, workers);
        for (int i = 0; i < workers; ++i) {
            threads_.emplace_back([this, i] { worker_loop(i); });
        }
    }

    ~ThreadPool() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    int width() const { return static_cast<int>(threads_.size()) + 1; }

    // Runs fn(begin, end) over [begin, end) split into one contiguous chunk
    // per participating thread. The calling thread takes the first chunk.
    // Nested or concurrent calls fall back to inline execution, so the
    // partitioning (and therefore the result) of any single call is fixed.
    void parallel_for(long long begin, long long end,
                      const std::function<void(long long, long long)>& fn) {
        const long long n = end - begin;
        if (n <= 0) return;
        const int parts = std::min<long long>(width(), n);
        if (parts <= 1 || !job_mu_.try_lock()) {
            fn(begin, end);
            return;
        }
        std::lock_guard<std::mutex> job_lk(job_mu_, std::adopt_lock);
        {
            std::lock_guard<std::mutex> lk(mu_);
            job_fn_ = &fn;
            job_begin_ = begin;
            job_end_ = end;
            job_parts_ = parts;
            pending_ = parts - 1;
            ++job_id_;
        }
        cv_.notify_all();
        run_chunk(fn, 0);
        std::unique_lock<std::mutex> lk(mu_);
        done_cv_.wait(lk, [this] { return pending_ == 0; });
        job_fn_ = nullptr;
    }

private:
    static int default_worker_count() {
        unsigned hw = std::thread::hardware_concurrency();
        return hw > 1 ? static_cast<int>(hw) - 1 : 0;
    }

    void run_chunk(const std::function<void(long long, long long)>& fn, int part) {
        const long long n = job_end_ - job_begin_;
        const long long chunk = (n + job_parts_ - 1) / job_parts_;
        const long long b = job_begin_ + chunk * part;
        const long long e = std::min(job_end_, b + chunk);
        if (b < e) fn(b, e);
    }

    void worker_loop(int index) {
        uint64_t seen = 0;
        for (;;) {
            const std::function<void(long long, long long)>* fn = nullptr;
            int part = 0;
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_.wait(lk, [&] { return stop_ || (job_fn_ && job_id_ != seen && index + 1 < job_parts_); });
                if (stop_) return;
                seen = job_id_;
                fn = job_fn_;
                part = index + 1;
            }
            run_chunk(*fn, part);
            {
                std::lock_guard<std::mutex> lk(mu_);
                if (--pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    std::vector<std::thread> threads_;
    std::mutex job_mu_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    const std::function<void(long long, long long)>* job_fn_ = nullptr;
    long long job_begin_ = 0;
    long long job_end_ = 0;
    int job_parts_ = 0;
    int pending_ = 0;
    uint64_t job_id_ = 0;
    bool stop_ = false;
};

}  // namespace unimp
