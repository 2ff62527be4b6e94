#pragma once

#include <string>

#include "shield/base_model.hpp"
#include "shield/patch.hpp"

namespace shield {

// Canonical names used in checkpoints, reports, and CLI flags.
std::string noise_name(NoiseMode mode);
NoiseMode noise_from_name(const std::string& name);
std::string variant_name(ShieldVariant variant);
ShieldVariant variant_from_name(const std::string& name);
std::string encoder_name(EncoderKind kind);
EncoderKind encoder_from_name(const std::string& name);

// JSON checkpoints. Doubles are written with enough digits to round-trip
// bitwise; each file carries a parameter digest that is re-verified on
// load.
void save_base(const BaseModel& model, const std::string& path);
BaseModel load_base(const std::string& path);

// The shield checkpoint stores the digest of the base it was patched
// onto; loading against any other base is refused.
void save_shield(const ShieldModel& model, const std::string& path);
ShieldModel load_shield(const std::string& path, const BaseModel& base);

}  // namespace shield
