#pragma once

#include <array>
#include <functional>
#include <vector>

#include "facemetric/rng.hpp"
#include "facemetric/tape.hpp"
#include "facemetric/tensor.hpp"

namespace facemetric {

enum class Padding { Same, Valid };
enum class Activation { Linear, Relu, Tanh, Sigmoid };
enum class Mode { Train, Eval };

const char* activation_name(Activation a);

// --- convolution / pooling -------------------------------------------------
//
// All spatial ops take a single sample (no batch axis); callers map over the
// batch. Valid padding follows out = floor((in - k) / stride) + 1; same
// padding picks a (possibly asymmetric) pad so out = ceil(in / stride).

// input [C,H,W], kernels [F,C,kh,kw], bias [F] (pass an empty Value for none).
Value conv2d(Value input, Value kernels, Value bias, std::array<int, 2> stride, Padding padding);

// input [C,T,H,W], kernels [F,C,kt,kh,kw], bias [F].
Value conv3d(Value input, Value kernels, Value bias, std::array<int, 3> stride, Padding padding);

// Valid padding only; gradient routes to the argmax cell, first index in
// scan order on ties.
Value maxpool2d(Value input, std::array<int, 2> window, std::array<int, 2> stride);
Value maxpool3d(Value input, std::array<int, 3> window, std::array<int, 3> stride);

// --- dense and elementwise ---------------------------------------------------

// input [n], weights [m,n], bias [m]; y = act(Wx + b).
Value dense(Value input, Value weights, Value bias, Activation act);

Value relu(Value x);
Value sigmoid(Value x);
Value tanh(Value x);
Value add(Value a, Value b);  // same shape, no broadcasting
Value mul(Value a, Value b);
Value affine(Value x, double scale, double shift);

// --- shape plumbing ----------------------------------------------------------

// Concatenation along axis 0 (the channel axis for feature maps).
Value concat_channels(const std::vector<Value>& xs);
// Contiguous [begin, begin+count) range along axis 0.
Value slice_channels(Value x, int begin, int count);
// Element i of a stacked [N, ...] tensor, with the leading axis dropped.
Value select_batch(Value stacked, int index);
Value flatten(Value x);

// --- reductions and metrics --------------------------------------------------

Value sum(Value x);
Value mean_of(const std::vector<Value>& scalars);

// L2 norm of u - v; the d = 0 kink uses subgradient 0.
Value euclidean_distance(Value u, Value v);
double euclidean_distance(const std::vector<double>& u, const std::vector<double>& v);

// --- batch normalization -------------------------------------------------------
//
// Normalizes per channel (axis 0 of each sample) over the whole batch plus
// all trailing axes. Returns the stacked [N, ...] result; slice samples back
// out with select_batch. Train mode uses batch statistics and updates the
// running buffers in place; eval mode reads the running buffers only.
Value batchnorm(const std::vector<Value>& xs, Value gamma, Value beta,
                Tensor& running_mean, Tensor& running_var,
                double momentum, double eps, Mode mode);

// --- gradient checking -------------------------------------------------------
//
// f builds a forward pass on the given tape (leasing `target` through
// Tape::param) and returns the scalar loss. Returns the max over coordinates
// of |analytic - central difference| / max(1, |analytic|).
double finite_diff_check(const std::function<Value(Tape&)>& f, Tensor& target, double eps);

// Same check restricted to a seeded random subset of coordinates; used where
// a full sweep would be too slow (whole-network checks).
double finite_diff_check_sampled(const std::function<Value(Tape&)>& f, Tensor& target,
                                 double eps, int max_coords, Rng& rng);

}  // namespace facemetric
