#pragma once

#include <json.hpp>

#include "kinfuse/encoder.hpp"
#include "kinfuse/numcore.hpp"
#include "kinfuse/trainer.hpp"

namespace kinfuse {

using Json = nlohmann::ordered_json;

inline constexpr int kCheckpointFormatVersion = 1;

Json to_json(const EncoderConfig& cfg);
/// Missing keys keep their defaults; unknown keys are ignored.
EncoderConfig encoder_config_from_json(const Json& j);

Json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const Json& j);

Json to_json(const Matrix& m);
Json to_json(const PriorMatrix& p);
Json to_json(const FusionTrace& t);

}  // namespace kinfuse
