#pragma once

#include <optional>
#include <string_view>

namespace crystalign {

inline constexpr int kNumElements = 118;

/// Atomic number (1..118) for a chemical symbol, case-sensitive ("Si", not "SI").
std::optional<int> atomic_number(std::string_view symbol) noexcept;

/// Symbol for an atomic number in 1..118.
std::string_view element_symbol(int z);

}  // namespace crystalign
