#include "bdforge/kernels.hpp"

#include <atomic>

namespace bdforge::kernels {

namespace {
#ifdef BDFORGE_USE_OPENMP
std::atomic<ExecMode> g_mode{ExecMode::Parallel};
#else
std::atomic<ExecMode> g_mode{ExecMode::Serial};
#endif
}  // namespace

void set_exec_mode(ExecMode mode) { g_mode.store(mode, std::memory_order_relaxed); }
ExecMode exec_mode() { return g_mode.load(std::memory_order_relaxed); }

#define BDFORGE_DISPATCH(fn, ...)                                     \
    (exec_mode() == ExecMode::Parallel ? parallel::fn(__VA_ARGS__)    \
                                       : serial::fn(__VA_ARGS__))

Tensor matmul(const Tensor& a, const Tensor& b) { return BDFORGE_DISPATCH(matmul, a, b); }
Tensor matmul_nt(const Tensor& a, const Tensor& b) { return BDFORGE_DISPATCH(matmul_nt, a, b); }
Tensor matmul_tn(const Tensor& a, const Tensor& b) { return BDFORGE_DISPATCH(matmul_tn, a, b); }
Tensor conv2d(const Tensor& x, const Tensor& k) { return BDFORGE_DISPATCH(conv2d, x, k); }
Tensor conv2d_grad_input(const Tensor& dy, const Tensor& k, const std::vector<int>& x_shape) {
    return BDFORGE_DISPATCH(conv2d_grad_input, dy, k, x_shape);
}
Tensor conv2d_grad_kernel(const Tensor& x, const Tensor& dy, const std::vector<int>& k_shape) {
    return BDFORGE_DISPATCH(conv2d_grad_kernel, x, dy, k_shape);
}
Tensor conv1d(const Tensor& x, const Tensor& k) { return BDFORGE_DISPATCH(conv1d, x, k); }
Tensor conv1d_grad_input(const Tensor& dy, const Tensor& k, const std::vector<int>& x_shape) {
    return BDFORGE_DISPATCH(conv1d_grad_input, dy, k, x_shape);
}
Tensor conv1d_grad_kernel(const Tensor& x, const Tensor& dy, const std::vector<int>& k_shape) {
    return BDFORGE_DISPATCH(conv1d_grad_kernel, x, dy, k_shape);
}
std::pair<Tensor, std::vector<std::uint32_t>> maxpool2(const Tensor& x) {
    return BDFORGE_DISPATCH(maxpool2, x);
}
Tensor add(const Tensor& a, const Tensor& b) { return BDFORGE_DISPATCH(add, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return BDFORGE_DISPATCH(mul, a, b); }
Tensor relu(const Tensor& a) { return BDFORGE_DISPATCH(relu, a); }

#undef BDFORGE_DISPATCH

Tensor maxpool2_backward(const Tensor& dy, const std::vector<std::uint32_t>& argmax,
                         const std::vector<int>& x_shape) {
    Tensor dx(x_shape);
    // Each input cell belongs to at most one pool window, so targets are
    // unique and the scatter is race-free.
    for (std::size_t i = 0; i < argmax.size(); ++i) {
        dx[argmax[i]] += dy[i];
    }
    return dx;
}

}  // namespace bdforge::kernels
