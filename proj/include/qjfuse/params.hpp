// Named parameter arrays grouped for per-group learning rates and
// gradient bookkeeping.

#pragma once

#include <deque>
#include <map>
#include <string>
#include <vector>

#include "qjfuse/errors.hpp"

namespace qjfuse::ad {

struct ParamArray {
    std::string name;  // unique, "group/array"
    std::string group; // learning-rate group
    int64_t rows = 0, cols = 1;
    std::vector<double> value;
    std::vector<double> grad;

    int64_t size() const { return rows * cols; }
};

class ParamStore {
public:
    ParamArray& add(const std::string& group, const std::string& array,
                    int64_t rows, int64_t cols) {
        const std::string key = group + "/" + array;
        if (index_.count(key)) throw Error("duplicate parameter " + key);
        index_[key] = arrays_.size();
        arrays_.push_back(ParamArray{key, group, rows, cols,
                                     std::vector<double>(static_cast<size_t>(rows * cols), 0.0),
                                     std::vector<double>(static_cast<size_t>(rows * cols), 0.0)});
        return arrays_.back();
    }

    ParamArray& at(const std::string& key) {
        auto it = index_.find(key);
        if (it == index_.end()) throw Error("unknown parameter " + key);
        return arrays_[it->second];
    }
    const ParamArray& at(const std::string& key) const {
        auto it = index_.find(key);
        if (it == index_.end()) throw Error("unknown parameter " + key);
        return arrays_[it->second];
    }
    bool has(const std::string& key) const { return index_.count(key) > 0; }

    std::deque<ParamArray>& arrays() { return arrays_; }
    const std::deque<ParamArray>& arrays() const { return arrays_; }

    void zero_grad() {
        for (auto& a : arrays_) std::fill(a.grad.begin(), a.grad.end(), 0.0);
    }

    int64_t total_size() const {
        int64_t n = 0;
        for (const auto& a : arrays_) n += a.size();
        return n;
    }

    // Flat per-group views used by grad_check.
    std::map<std::string, std::vector<double>> grads_by_array() const {
        std::map<std::string, std::vector<double>> out;
        for (const auto& a : arrays_) out[a.name] = a.grad;
        return out;
    }

private:
    std::deque<ParamArray> arrays_;
    std::map<std::string, size_t> index_;
};

} // namespace qjfuse::ad
