// Copyright (c) 2026 The fairprompt Authors
// SPDX-License-Identifier: Apache-2.0

#include "fairprompt/rng.hpp"

#include <sstream>

#include "fairprompt/errors.hpp"

namespace fairprompt {

std::string Rng::serialize() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

Rng Rng::deserialize(const std::string& text) {
  Rng r;
  std::istringstream is(text);
  is >> r.engine_;
  if (is.fail()) throw ParseError("Rng::deserialize: malformed engine state");
  return r;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace fairprompt
