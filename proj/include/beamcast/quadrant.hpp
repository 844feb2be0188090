#pragma once

#include <array>
#include <string_view>

namespace beamcast {

inline constexpr double kHighSpeedThreshold = 0.5;

/// Scene quadrant / expert index: LOS-L=0, LOS-H=1, NLOS-L=2, NLOS-H=3.
constexpr int hard_assignment(int scene, double speed_norm) {
  return 2 * (scene != 0 ? 1 : 0) + (speed_norm >= kHighSpeedThreshold ? 1 : 0);
}

inline constexpr std::array<std::string_view, 4> kQuadrantNames = {"LOS-L", "LOS-H", "NLOS-L",
                                                                   "NLOS-H"};

}  // namespace beamcast
