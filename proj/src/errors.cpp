#include "ems/errors.hpp"

#include <sstream>

namespace ems {

std::string Diagnostic::str() const {
    std::ostringstream os;
    os << (severity == Severity::Error ? "error" : "warning");
    if (line > 0) {
        os << " at line " << line;
        if (column > 0) os << ", column " << column;
    }
    os << ": " << message;
    return os.str();
}

}  // namespace ems
