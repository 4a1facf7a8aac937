#include "demaformer/tensor.hpp"

namespace demaformer {

thread_local Tape* Tape::active_ = nullptr;

}  // namespace demaformer
