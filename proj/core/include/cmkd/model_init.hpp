#pragma once

#include <cstdint>
#include <vector>

#include "cmkd/rng.hpp"
#include "cmkd/tape.hpp"

namespace cmkd {

enum class InitKind { Zero, One, UniformFanIn, Normal002 };

struct InitSpec {
  int param = -1;
  InitKind kind = InitKind::Zero;
  int fan_in = 0;
};

// Collected while a model is assembled; applied once with a seed. Streams are
// keyed by parameter name so the draw for one parameter does not depend on
// registration order.
struct InitRegistry {
  std::vector<InitSpec> specs;
  void note(int param, InitKind kind, int fan_in = 0) { specs.push_back({param, kind, fan_in}); }
};

template <typename T>
void apply_init(ParamStoreT<T>& store, const InitRegistry& reg, std::uint64_t seed) {
  for (const InitSpec& s : reg.specs) {
    auto& p = store[s.param];
    auto rs = rng::derive(seed, rng::fnv1a(p.name));
    switch (s.kind) {
      case InitKind::Zero:
        for (auto& x : p.value.data) x = T(0);
        break;
      case InitKind::One:
        for (auto& x : p.value.data) x = T(1);
        break;
      case InitKind::UniformFanIn: {
        const double bound = std::sqrt(6.0 / static_cast<double>(s.fan_in));
        for (auto& x : p.value.data) x = static_cast<T>((rs.next_unit() * 2.0 - 1.0) * bound);
        break;
      }
      case InitKind::Normal002:
        for (auto& x : p.value.data) x = static_cast<T>(rs.next_normal() * 0.02);
        break;
    }
  }
}

} // namespace cmkd
