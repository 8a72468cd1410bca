#include "mlcl/tensor.hpp"

#include <sstream>

namespace mlcl {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d < 0) throw std::invalid_argument("negative extent in shape " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

namespace detail {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

}  // namespace detail

}  // namespace mlcl
