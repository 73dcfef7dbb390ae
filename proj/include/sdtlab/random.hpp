/* Copyright 2026 The sdtlab Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License. */

#pragma once

#include <cstdint>
#include <random>

namespace sdtlab {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent substreams.
constexpr uint64_t mix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Substream identifiers. Each consumer of randomness owns one so that adding
// draws in one place never shifts another.
enum class Stream : uint64_t {
  kPhantom = 1,
  kScribble = 2,
  kInit = 3,
  kShuffle = 4,
  kAugment = 5,
};

constexpr uint64_t derive_seed(uint64_t seed, Stream stream, uint64_t index = 0) {
  return mix64(mix64(mix64(seed) ^ static_cast<uint64_t>(stream)) ^ index);
}

inline Rng make_rng(uint64_t seed, Stream stream, uint64_t index = 0) {
  return Rng(derive_seed(seed, stream, index));
}

}  // namespace sdtlab
