#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace exfusion {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
	x += 0x9e3779b97f4a7c15ULL;
	x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
	x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
	return x ^ (x >> 31);
}

constexpr std::uint64_t hash_name(std::string_view name) noexcept {
	std::uint64_t h = 0xcbf29ce484222325ULL;
	for (char c : name) {
		h ^= static_cast<unsigned char>(c);
		h *= 0x100000001b3ULL;
	}
	return h;
}

/// Independent stream for (seed, key, index). Parameter initialization keys on
/// the tensor name so adding or removing tensors never shifts other tensors' draws.
inline std::mt19937_64 derive_rng(std::uint64_t seed, std::string_view key, std::uint64_t index = 0) {
	return std::mt19937_64(mix64(mix64(seed) ^ hash_name(key)) ^ mix64(index + 0x5851f42d4c957f2dULL));
}

} // namespace exfusion
