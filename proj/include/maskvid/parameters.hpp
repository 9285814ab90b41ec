#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "maskvid/types.hpp"

namespace maskvid {

struct Parameter {
    Mat value;
    Mat grad;
};

enum class InitKind { zeros, normal };

/// Shape and initializer of one named parameter.
struct ParamSpec {
    std::string name;
    int rows = 0;
    int cols = 0;
    InitKind init = InitKind::zeros;
    double scale = 0.0;  ///< standard deviation for InitKind::normal
};

/// Named parameters in lexicographic order (the order used for serialization and updates).
class ParameterSet {
public:
    Parameter& add(const std::string& name, int rows, int cols);
    Parameter& at(const std::string& name);
    const Parameter& at(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    std::size_t size() const { return params_.size(); }

    void zero_grad();
    /// Total number of scalars.
    std::size_t scalar_count() const;
    double grad_norm() const;

private:
    std::map<std::string, Parameter> params_;
};

/// Each parameter draws from its own stream seeded by (seed, name), so adding or
/// removing parameters never changes the values of the others.
ParameterSet initialize_parameters(const std::vector<ParamSpec>& specs, uint64_t seed);

uint64_t stream_seed(uint64_t seed, const std::string& name);

/// Decoupled-weight-decay Adam moments.
struct AdamState {
    std::map<std::string, Mat> m;
    std::map<std::string, Mat> v;
    int64_t updates = 0;
};

}  // namespace maskvid
