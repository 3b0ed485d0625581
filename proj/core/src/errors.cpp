#include "inflight/errors.hpp"

namespace inflight {

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::config:
            return "config";
        case Stage::data:
            return "data";
        case Stage::attack:
            return "attack";
        case Stage::train:
            return "train";
        case Stage::recover:
            return "recover";
        case Stage::detect:
            return "detect";
        case Stage::evaluate:
            return "evaluate";
        case Stage::io:
            return "io";
        case Stage::internal:
            return "internal";
    }
    return "internal";
}

}  // namespace inflight
