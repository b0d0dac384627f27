#pragma once

// Published xBD damage-assessment scores (percent): localization F1, damage
// F1, overall F1, then F1 for no/minor/major damage and destroyed.

#include <array>

struct XbdRow {
  const char* method;
  double loc, clf, overall;
  std::array<double, 4> levels;
};

inline constexpr std::array<XbdRow, 14> kXbdRows{{
    {"Siamese-UNet", 85.92, 65.58, 71.68, {86.74, 50.02, 64.43, 71.68}},
    {"MTF", 83.60, 70.02, 74.10, {90.60, 49.30, 72.20, 83.70}},
    {"ChangeOS-18", 84.62, 69.87, 74.30, {88.61, 52.10, 70.36, 79.65}},
    {"ChangeOS-34", 85.16, 70.28, 74.74, {88.63, 52.38, 71.16, 80.08}},
    {"ChangeOS-50", 85.41, 70.88, 75.24, {88.98, 53.33, 71.24, 80.60}},
    {"ChangeOS-101", 85.69, 71.14, 75.50, {89.11, 53.11, 72.44, 80.79}},
    {"ChangeOS-18-PPS", 84.62, 73.89, 77.11, {92.38, 57.41, 72.54, 82.62}},
    {"ChangeOS-34-PPS", 85.16, 74.25, 77.52, {92.19, 58.07, 72.84, 82.79}},
    {"ChangeOS-50-PPS", 85.41, 75.64, 78.57, {92.66, 60.14, 74.18, 83.45}},
    {"ChangeOS-101-PPS", 85.69, 75.44, 78.52, {92.81, 59.38, 74.65, 83.29}},
    {"DamFormer", 86.86, 72.81, 77.02, {89.86, 56.78, 72.56, 80.51}},
    {"MambaBDA-Tiny", 87.20, 78.30, 80.97, {95.84, 60.96, 77.43, 88.23}},
    {"MambaBDA-Small", 86.61, 78.80, 81.14, {95.99, 62.82, 76.26, 88.37}},
    {"MambaBDA-Base", 87.38, 78.84, 81.41, {95.94, 62.74, 76.46, 88.58}},
}};
