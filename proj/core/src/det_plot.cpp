#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "metricforge/errors.hpp"
#include "metricforge/eval.hpp"

namespace metricforge {

namespace {

// Inverse standard normal CDF (Acklam's rational approximation, |rel err| < 1.2e-9).
double probit(double p) {
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                             1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                             6.680131188771972e+01,  -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                             -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double lo = 0.02425;
  if (p < lo) {
    const double q = std::sqrt(-2 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  if (p > 1 - lo) return -probit(1 - p);
  const double q = p - 0.5, r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
}

constexpr double kMinRate = 0.001;  // 0.1 %
constexpr double kMaxRate = 0.5;
constexpr double kSize = 480, kMargin = 64;

double axis(double rate) {
  const double z0 = probit(kMinRate), z1 = probit(kMaxRate);
  const double z = probit(std::clamp(rate, kMinRate, kMaxRate));
  return (z - z0) / (z1 - z0) * kSize;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string percent_label(double rate) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", 100.0 * rate);
  return buf;
}

}  // namespace

void write_det_svg(const std::filesystem::path& path, const std::vector<DetPoint>& points, const EERResult& eer) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());

  const double total = kSize + 2 * kMargin;
  const auto x = [](double far) { return kMargin + axis(far); };
  const auto y = [](double frr) { return kMargin + kSize - axis(frr); };

  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << total << "\" height=\"" << total << "\" viewBox=\"0 0 "
      << total << ' ' << total << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

  const double ticks[] = {0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.4};
  for (double t : ticks) {
    out << "<line x1=\"" << num(x(t)) << "\" y1=\"" << num(y(kMinRate)) << "\" x2=\"" << num(x(t)) << "\" y2=\""
        << num(y(kMaxRate)) << "\" stroke=\"#ddd\"/>\n";
    out << "<line x1=\"" << num(x(kMinRate)) << "\" y1=\"" << num(y(t)) << "\" x2=\"" << num(x(kMaxRate)) << "\" y2=\""
        << num(y(t)) << "\" stroke=\"#ddd\"/>\n";
    out << "<text x=\"" << num(x(t)) << "\" y=\"" << num(y(kMinRate) + 16) << "\" text-anchor=\"middle\">"
        << percent_label(t) << "</text>\n";
    out << "<text x=\"" << num(x(kMinRate) - 6) << "\" y=\"" << num(y(t) + 4) << "\" text-anchor=\"end\">"
        << percent_label(t) << "</text>\n";
  }
  out << "<rect x=\"" << kMargin << "\" y=\"" << kMargin << "\" width=\"" << kSize << "\" height=\"" << kSize
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  out << "<text x=\"" << num(kMargin + kSize / 2) << "\" y=\"" << num(total - 16)
      << "\" text-anchor=\"middle\">False acceptance rate (%)</text>\n";
  out << "<text transform=\"translate(16," << num(kMargin + kSize / 2)
      << ") rotate(-90)\" text-anchor=\"middle\">False rejection rate (%)</text>\n";

  // Diagonal FAR = FRR; the curve meets it at the EER.
  out << "<line x1=\"" << num(x(kMinRate)) << "\" y1=\"" << num(y(kMinRate)) << "\" x2=\"" << num(x(kMaxRate))
      << "\" y2=\"" << num(y(kMaxRate)) << "\" stroke=\"#999\" stroke-dasharray=\"4 4\"/>\n";

  out << "<polyline fill=\"none\" stroke=\"#1f5fbf\" stroke-width=\"2\" points=\"";
  for (const auto& p : points) out << num(x(p.far)) << ',' << num(y(p.frr)) << ' ';
  out << "\"/>\n";

  out << "<circle cx=\"" << num(x(eer.eer)) << "\" cy=\"" << num(y(eer.eer)) << "\" r=\"4\" fill=\"#c0392b\"/>\n";
  char label[64];
  std::snprintf(label, sizeof label, "EER = %.2f%%", 100.0 * eer.eer);
  out << "<text x=\"" << num(kMargin + kSize - 8) << "\" y=\"" << num(kMargin + 18) << "\" text-anchor=\"end\">" << label
      << "</text>\n";
  out << "</svg>\n";
}

}  // namespace metricforge
