#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dpc/errors.hpp"

namespace dpc {

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

// Dense row-major tensor. Scalar S is float for training and double for
// gradient verification; the whole engine is templated on it.
template <class S>
struct TensorT {
    std::vector<std::size_t> shape;
    std::vector<S> values;

    TensorT() = default;

    explicit TensorT(std::vector<std::size_t> shp, S fill = S(0))
        : shape(std::move(shp)), values(shape_numel(shape), fill) {
        validate_extents();
    }

    TensorT(std::vector<std::size_t> shp, std::vector<S> vals)
        : shape(std::move(shp)), values(std::move(vals)) {
        validate_extents();
        if (values.size() != shape_numel(shape)) {
            throw ContractViolation("tensor: value count " + std::to_string(values.size()) +
                                    " does not match shape " + shape_str(shape));
        }
    }

    std::size_t size() const { return values.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t extent(std::size_t axis) const { return shape.at(axis); }

    S& operator[](std::size_t i) { return values[i]; }
    const S& operator[](std::size_t i) const { return values[i]; }

    S& at(std::size_t i, std::size_t j) { return values[i * shape[1] + j]; }
    const S& at(std::size_t i, std::size_t j) const { return values[i * shape[1] + j]; }

    S& at(std::size_t i, std::size_t j, std::size_t k) {
        return values[(i * shape[1] + j) * shape[2] + k];
    }
    const S& at(std::size_t i, std::size_t j, std::size_t k) const {
        return values[(i * shape[1] + j) * shape[2] + k];
    }

    void fill(S v) { std::fill(values.begin(), values.end(), v); }

    bool same_shape(const TensorT& other) const { return shape == other.shape; }

private:
    void validate_extents() const {
        for (std::size_t e : shape) {
            if (e == 0) throw ContractViolation("tensor: zero extent in shape " + shape_str(shape));
        }
    }
};

template <class S>
bool all_finite(const TensorT<S>& t) {
    for (S v : t.values) {
        if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
}

template <class S>
TensorT<S> row_vector(std::initializer_list<S> vals) {
    std::vector<S> v(vals);
    const std::size_t n = v.size();
    return TensorT<S>({n}, std::move(v));
}

// Lossy precision conversions, used when moving between the float training
// path and the double verification path.
template <class To, class From>
TensorT<To> tensor_cast(const TensorT<From>& t) {
    TensorT<To> out(t.shape);
    for (std::size_t i = 0; i < t.size(); ++i) out.values[i] = static_cast<To>(t.values[i]);
    return out;
}

// Trainable or frozen named value. Gradient storage exists only while the
// parameter is trainable; frozen parameters never accumulate gradient.
template <class S>
struct ParameterT {
    std::string name;
    TensorT<S> value;
    TensorT<S> grad;
    bool trainable = false;

    ParameterT() = default;

    ParameterT(std::string nm, TensorT<S> v, bool train)
        : name(std::move(nm)), value(std::move(v)), trainable(train) {
        if (trainable) grad = TensorT<S>(value.shape, S(0));
    }

    void zero_grad() {
        if (trainable) grad.fill(S(0));
    }
};

} // namespace dpc
