#include "lmdet/rng.hpp"

#include <sstream>

#include "lmdet/errors.hpp"

namespace lmdet {

std::string Rng::save_state() const {
    std::ostringstream os;
    os << engine_;
    os << " " << (have_spare_ ? 1 : 0);
    if (have_spare_) {
        os.precision(17);
        os << " " << spare_;
    }
    return os.str();
}

void Rng::load_state(const std::string& state) {
    std::istringstream is(state);
    is >> engine_;
    int spare_flag = 0;
    is >> spare_flag;
    if (is.fail()) throw DataError("rng: malformed state string");
    have_spare_ = spare_flag != 0;
    if (have_spare_) {
        is >> spare_;
        if (is.fail()) throw DataError("rng: malformed state string");
    }
}

}  // namespace lmdet
