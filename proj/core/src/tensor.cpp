#include "cvl/tensor.hpp"

#include <cmath>
#include <sstream>

namespace cvl {

runtime_options & options() {
    static runtime_options opts;
    return opts;
}

void fail(const std::string & msg) {
    throw std::runtime_error(msg);
}

int64_t numel_of(const std::vector<int64_t> & shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        check(d > 0, "tensor: non-positive dimension " + std::to_string(d) + " in shape " +
                         shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const std::vector<int64_t> & shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) {
            os << ",";
        }
        os << shape[i];
    }
    os << "]";
    return os.str();
}

template <typename T>
void check_finite(const tensor<T> & t, const char * op_name) {
    if (!options().finite_checks) {
        return;
    }
    for (size_t i = 0; i < t.data.size(); ++i) {
        if (!std::isfinite(t.data[i])) {
            fail(std::string(op_name) + ": non-finite value at flat index " + std::to_string(i) +
                 " in output of shape " + shape_str(t.shape));
        }
    }
}

template void check_finite<float>(const tensor<float> &, const char *);
template void check_finite<double>(const tensor<double> &, const char *);

uint64_t flop_counter::total_macs() const {
    uint64_t n = 0;
    for (const record & r : records) {
        n += r.macs;
    }
    return n;
}

flop_counter & macs_counter() {
    static flop_counter c;
    return c;
}

}  // namespace cvl
