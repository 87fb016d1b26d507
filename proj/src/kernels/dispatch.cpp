#include <atomic>
#include <cstdlib>
#include <string>

#include "dagmesh/kernels.hpp"

namespace dagmesh::kernels {

#if defined(DAGMESH_HAVE_AVX2)
namespace avx2 {
const KernelTable& table();
}
#endif

const KernelTable* avx2_table() {
#if defined(DAGMESH_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  static const bool supported = __builtin_cpu_supports("avx2");
  return supported ? &avx2::table() : nullptr;
#else
  return nullptr;
#endif
}

namespace {

const KernelTable* initial_choice() {
  const char* env = std::getenv("DAGMESH_KERNELS");
  if (env != nullptr && std::string(env) == "scalar") return &scalar_table();
  if (const auto* t = avx2_table()) return t;
  return &scalar_table();
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> choice{initial_choice()};
  return choice;
}

}  // namespace

const KernelTable& active() { return *current().load(std::memory_order_acquire); }

bool select(std::string_view name) {
  if (name == "scalar") {
    current().store(&scalar_table(), std::memory_order_release);
    return true;
  }
  if (name == "avx2") {
    if (const auto* t = avx2_table()) {
      current().store(t, std::memory_order_release);
      return true;
    }
  }
  return false;
}

}  // namespace dagmesh::kernels
