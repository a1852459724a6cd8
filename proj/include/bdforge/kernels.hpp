#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "bdforge/tensor.hpp"

namespace bdforge::kernels {

// Hot inner loops exist twice: a plain serial reference and an OpenMP
// version. The parallel kernels assign each output element to exactly one
// thread and keep the serial accumulation order inside it, so both modes
// produce bit-identical results; tests assert that equality.
enum class ExecMode { Serial, Parallel };

void set_exec_mode(ExecMode mode);
ExecMode exec_mode();

namespace serial {
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a (m,k) * b(n,k)^T -> (m,n)
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // a(m,k)^T * b(m,n) -> (k,n)
Tensor conv2d(const Tensor& x, const Tensor& k);
Tensor conv2d_grad_input(const Tensor& dy, const Tensor& k, const std::vector<int>& x_shape);
Tensor conv2d_grad_kernel(const Tensor& x, const Tensor& dy, const std::vector<int>& k_shape);
Tensor conv1d(const Tensor& x, const Tensor& k);
Tensor conv1d_grad_input(const Tensor& dy, const Tensor& k, const std::vector<int>& x_shape);
Tensor conv1d_grad_kernel(const Tensor& x, const Tensor& dy, const std::vector<int>& k_shape);
std::pair<Tensor, std::vector<std::uint32_t>> maxpool2(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& a);
}  // namespace serial

namespace parallel {
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor conv2d(const Tensor& x, const Tensor& k);
Tensor conv2d_grad_input(const Tensor& dy, const Tensor& k, const std::vector<int>& x_shape);
Tensor conv2d_grad_kernel(const Tensor& x, const Tensor& dy, const std::vector<int>& k_shape);
Tensor conv1d(const Tensor& x, const Tensor& k);
Tensor conv1d_grad_input(const Tensor& dy, const Tensor& k, const std::vector<int>& x_shape);
Tensor conv1d_grad_kernel(const Tensor& x, const Tensor& dy, const std::vector<int>& k_shape);
std::pair<Tensor, std::vector<std::uint32_t>> maxpool2(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& a);
}  // namespace parallel

// Mode-dispatching entry points used by the tape ops.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor conv2d(const Tensor& x, const Tensor& k);
Tensor conv2d_grad_input(const Tensor& dy, const Tensor& k, const std::vector<int>& x_shape);
Tensor conv2d_grad_kernel(const Tensor& x, const Tensor& dy, const std::vector<int>& k_shape);
Tensor conv1d(const Tensor& x, const Tensor& k);
Tensor conv1d_grad_input(const Tensor& dy, const Tensor& k, const std::vector<int>& x_shape);
Tensor conv1d_grad_kernel(const Tensor& x, const Tensor& dy, const std::vector<int>& k_shape);
std::pair<Tensor, std::vector<std::uint32_t>> maxpool2(const Tensor& x);
Tensor maxpool2_backward(const Tensor& dy, const std::vector<std::uint32_t>& argmax,
                         const std::vector<int>& x_shape);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& a);

// Shape helpers shared by both implementations.
void check_matmul_shapes(const Tensor& a, const Tensor& b);
void check_conv2d_shapes(const Tensor& x, const Tensor& k);
void check_conv1d_shapes(const Tensor& x, const Tensor& k);

}  // namespace bdforge::kernels
