#include "lmdet/param_store.hpp"

namespace lmdet {

template class ParamStore<float>;
template class ParamStore<double>;

}  // namespace lmdet
