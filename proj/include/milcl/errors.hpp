#pragma once

#include <stdexcept>
#include <string>

namespace milcl {

// Malformed or truncated on-disk data (bad magic, short read, wrong version).
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace milcl
