#pragma once

#include <stdexcept>
#include <string>
#include <sstream>
#include <vector>
#include <cstdint>

namespace kdml {

// Error taxonomy used across the library:
//   shape_error      - tensor dimension mismatch
//   contract_error   - precondition violation on an operation
//   config_error     - invalid experiment/plan configuration
//   divergence_error - non-finite loss during training
struct error : std::runtime_error {
    explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

struct shape_error : error {
    explicit shape_error(const std::string& msg) : error(msg) {}
};

struct contract_error : error {
    explicit contract_error(const std::string& msg) : error(msg) {}
};

struct config_error : error {
    explicit config_error(const std::string& msg) : error(msg) {}
};

struct divergence_error : error {
    explicit divergence_error(const std::string& msg) : error(msg) {}
};

using Shape = std::vector<int>;

enum class Task { classification, segmentation };

enum class Role { teacher, student };

inline const char* to_string(Task t) {
    return t == Task::classification ? "classification" : "segmentation";
}

inline const char* to_string(Role r) { return r == Role::teacher ? "teacher" : "student"; }

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

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
}

}  // namespace kdml
