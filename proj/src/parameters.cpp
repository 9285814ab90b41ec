#include "maskvid/parameters.hpp"

#include <cmath>
#include <random>

#include "maskvid/error.hpp"

namespace maskvid {

Parameter& ParameterSet::add(const std::string& name, int rows, int cols) {
    auto [it, inserted] = params_.try_emplace(name);
    if (!inserted) throw Error("duplicate parameter '" + name + "'");
    it->second.value = Mat::Zero(rows, cols);
    it->second.grad = Mat::Zero(rows, cols);
    return it->second;
}

Parameter& ParameterSet::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
}

const Parameter& ParameterSet::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
}

void ParameterSet::zero_grad() {
    for (auto& [name, p] : params_) p.grad.setZero();
}

std::size_t ParameterSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
}

double ParameterSet::grad_norm() const {
    double s = 0.0;
    for (const auto& [name, p] : params_) s += p.grad.squaredNorm();
    return std::sqrt(s);
}

uint64_t stream_seed(uint64_t seed, const std::string& name) {
    uint64_t h = 1469598103934665603ULL ^ (seed * 0x9E3779B97F4A7C15ULL);
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    return h;
}

ParameterSet initialize_parameters(const std::vector<ParamSpec>& specs, uint64_t seed) {
    ParameterSet set;
    for (const auto& spec : specs) {
        Parameter& p = set.add(spec.name, spec.rows, spec.cols);
        if (spec.init == InitKind::normal) {
            std::mt19937_64 rng(stream_seed(seed, spec.name));
            std::normal_distribution<double> dist(0.0, spec.scale);
            for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = dist(rng);
        }
    }
    return set;
}

}  // namespace maskvid
