#pragma once

// Small constructed detection sets with hand-enumerated PR areas, shared by
// the unit and acceptance suites.

#include <string>
#include <vector>

#include "brainseg/metrics.hpp"

namespace brainseg::scenarios {

struct ApScenario {
  std::string name;
  std::vector<std::vector<Detection>> detections;
  std::vector<std::vector<Instance>> ground_truth;
  double expected_mean;
};

/// Rectangle [y0,y1) x [x0,x1) on a 32x32 raster.
inline Mask rect(int y0, int x0, int y1, int x1) {
  Mask m(32, 32);
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) m.at(y, x) = 1;
  }
  return m;
}

inline Detection det(int cls, double score, Mask m) {
  Detection d;
  d.class_id = cls;
  d.score = score;
  d.mask = std::move(m);
  return d;
}

inline std::vector<ApScenario> ap_scenarios() {
  const Mask a = rect(0, 0, 4, 4), b = rect(8, 8, 12, 12), c = rect(20, 20, 24, 24), far = rect(28, 0, 32, 4);
  std::vector<ApScenario> s;
  s.push_back({"single perfect match", {{det(1, 1.0, a)}}, {{{1, a}}}, 1.0});
  s.push_back({"no detections", {{}}, {{{1, a}}}, 0.0});
  // TP, FP, TP over 2 instances: P = 1, 1/2, 2/3 at R = 1/2, 1/2, 1.
  s.push_back({"tp fp tp", {{det(1, 0.9, a), det(1, 0.8, far), det(1, 0.7, b)}}, {{{1, a}, {1, b}}}, 5.0 / 6.0});
  // FP first: envelope is 2/3 everywhere.
  s.push_back({"fp tp tp", {{det(1, 0.9, far), det(1, 0.8, a), det(1, 0.7, b)}}, {{{1, a}, {1, b}}}, 2.0 / 3.0});
  s.push_back({"duplicate is a false positive", {{det(1, 0.9, a), det(1, 0.8, a)}}, {{{1, a}}}, 1.0});
  // Shift by two columns: IoU 8/24. By one column: 12/20.
  s.push_back({"below threshold", {{det(1, 0.9, rect(0, 2, 4, 6))}}, {{{1, a}}}, 0.0});
  s.push_back({"above threshold", {{det(1, 0.9, rect(0, 1, 4, 5))}}, {{{1, a}}}, 1.0});
  // Class 2 missed; class 3 has no ground truth and is left out.
  s.push_back({"class mean", {{det(1, 0.9, a), det(3, 0.9, c)}}, {{{1, a}, {2, b}}}, 0.5});
  s.push_back({"wrong class", {{det(2, 0.99, a)}}, {{{1, a}}}, 0.0});
  // Detections only match instances of their own section.
  s.push_back({"sections kept apart",
               {{det(1, 0.9, b), det(1, 0.7, a)}, {det(1, 0.8, b)}},
               {{{1, a}}, {{1, b}}},
               2.0 / 3.0});
  // The first detection takes the instance it overlaps most (IoU 1 vs 8/12),
  // leaving the other for the second detection (IoU 6/10).
  s.push_back({"best overlap wins", {{det(1, 0.9, rect(0, 2, 1, 12)), det(1, 0.8, rect(0, 0, 1, 6))}},
               {{{1, rect(0, 0, 1, 10)}, {1, rect(0, 2, 1, 12)}}},
               1.0});
  // Recall stops at 1/3.
  s.push_back({"partial recall", {{det(1, 0.9, a), det(1, 0.8, far)}}, {{{1, a}, {1, b}, {1, c}}}, 1.0 / 3.0});
  return s;
}

}  // namespace brainseg::scenarios
