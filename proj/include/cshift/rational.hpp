#pragma once

#include <charconv>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cshift {

/// Exact rational used for perturbation budgets such as "2/255". Decimal
/// input ("0.25") is also accepted and stored exactly as a power-of-ten
/// fraction.
struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  [[nodiscard]] double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  [[nodiscard]] std::string str() const {
    return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den);
  }
  friend bool operator==(const Rational&, const Rational&) = default;
};

namespace detail {

inline std::int64_t parse_int(std::string_view s, std::string_view whole) {
  std::int64_t v = 0;
  const auto* first = s.data();
  if (!s.empty() && s.front() == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    throw std::invalid_argument("malformed number '" + std::string(whole) + "'");
  }
  return v;
}

inline Rational normalized(std::int64_t num, std::int64_t den, std::string_view whole) {
  if (den == 0) throw std::invalid_argument("zero denominator in '" + std::string(whole) + "'");
  if (den < 0) {
    num = -num;
    den = -den;
  }
  const std::int64_t g = std::gcd(num, den);
  if (g > 1) {
    num /= g;
    den /= g;
  }
  return {num, den};
}

inline Rational parse_decimal(std::string_view s, std::string_view whole) {
  const auto dot = s.find('.');
  if (dot == std::string_view::npos) return {parse_int(s, whole), 1};
  std::string digits(s.substr(0, dot));
  const std::string_view frac = s.substr(dot + 1);
  if (frac.size() > 15) throw std::invalid_argument("too many decimals in '" + std::string(whole) + "'");
  std::int64_t den = 1;
  for (char ch : frac) {
    if (ch < '0' || ch > '9') throw std::invalid_argument("malformed number '" + std::string(whole) + "'");
    digits.push_back(ch);
    den *= 10;
  }
  if (digits.empty() || digits == "-" || digits == "+") digits += "0";
  return normalized(parse_int(digits, whole), den, whole);
}

}  // namespace detail

inline Rational parse_rational(std::string_view text) {
  const auto slash = text.find('/');
  if (slash == std::string_view::npos) return detail::parse_decimal(text, text);
  const Rational a = detail::parse_decimal(text.substr(0, slash), text);
  const Rational b = detail::parse_decimal(text.substr(slash + 1), text);
  return detail::normalized(a.num * b.den, a.den * b.num, text);
}

}  // namespace cshift
