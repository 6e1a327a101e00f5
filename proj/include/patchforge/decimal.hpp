#pragma once

// Exact decimal arithmetic for USD cost accounting. Values are a signed
// integer mantissa with a base-10 scale; addition and integer multiplication
// never round, so per-turn costs sum to the exact total.

#include <cstdint>
#include <string>
#include <string_view>

#include "patchforge/util.hpp"

namespace patchforge {

class Decimal {
 public:
  Decimal() = default;

  static Decimal from_int(long long value) { return Decimal(value, 0); }

  // Accepts [+-]digits[.digits]; rejects anything else.
  static Decimal parse(std::string_view text) {
    if (text.empty()) throw Error("DecimalParse", "empty decimal");
    bool negative = false;
    size_t pos = 0;
    if (text[0] == '+' || text[0] == '-') {
      negative = text[0] == '-';
      pos = 1;
    }
    long long mantissa = 0;
    int scale = 0;
    bool seen_digit = false, seen_dot = false;
    for (; pos < text.size(); ++pos) {
      char c = text[pos];
      if (c == '.') {
        if (seen_dot) throw Error("DecimalParse", "two dots in " + std::string(text));
        seen_dot = true;
        continue;
      }
      if (c < '0' || c > '9') throw Error("DecimalParse", "bad char in " + std::string(text));
      seen_digit = true;
      mantissa = checked_mul(mantissa, 10);
      mantissa += c - '0';
      if (seen_dot) ++scale;
    }
    if (!seen_digit) throw Error("DecimalParse", "no digits in " + std::string(text));
    return Decimal(negative ? -mantissa : mantissa, scale);
  }

  Decimal operator+(const Decimal& other) const {
    Decimal a = *this, b = other;
    while (a.scale_ < b.scale_) a = Decimal(checked_mul(a.mantissa_, 10), a.scale_ + 1);
    while (b.scale_ < a.scale_) b = Decimal(checked_mul(b.mantissa_, 10), b.scale_ + 1);
    return Decimal(a.mantissa_ + b.mantissa_, a.scale_);
  }

  Decimal& operator+=(const Decimal& other) { return *this = *this + other; }

  Decimal times(long long factor) const { return Decimal(checked_mul(mantissa_, factor), scale_); }

  // Exact division by 10^k (shifts the scale; no information loss).
  Decimal shift_down(int k) const { return Decimal(mantissa_, scale_ + k); }

  bool operator==(const Decimal& other) const {
    Decimal a = normalized(), b = other.normalized();
    return a.mantissa_ == b.mantissa_ && a.scale_ == b.scale_;
  }
  bool operator!=(const Decimal& other) const { return !(*this == other); }

  bool is_zero() const { return mantissa_ == 0; }
  bool negative() const { return mantissa_ < 0; }

  double to_double() const {
    double value = static_cast<double>(mantissa_);
    for (int i = 0; i < scale_; ++i) value /= 10.0;
    return value;
  }

  std::string to_string() const {
    Decimal n = normalized();
    long long mant = n.mantissa_ < 0 ? -n.mantissa_ : n.mantissa_;
    std::string digits = std::to_string(mant);
    std::string out = n.mantissa_ < 0 ? "-" : "";
    if (n.scale_ == 0) return out + digits;
    if (static_cast<int>(digits.size()) <= n.scale_)
      digits.insert(0, n.scale_ - digits.size() + 1, '0');
    out += digits.substr(0, digits.size() - n.scale_);
    out += '.';
    out += digits.substr(digits.size() - n.scale_);
    return out;
  }

 private:
  Decimal(long long mantissa, int scale) : mantissa_(mantissa), scale_(scale) {}

  Decimal normalized() const {
    Decimal n = *this;
    while (n.scale_ > 0 && n.mantissa_ % 10 == 0) {
      n.mantissa_ /= 10;
      --n.scale_;
    }
    if (n.mantissa_ == 0) n.scale_ = 0;
    return n;
  }

  static long long checked_mul(long long a, long long b) {
    __int128 wide = static_cast<__int128>(a) * b;
    if (wide > INT64_MAX || wide < INT64_MIN) throw Error("DecimalOverflow", "mantissa overflow");
    return static_cast<long long>(wide);
  }

  long long mantissa_ = 0;
  int scale_ = 0;
};

}  // namespace patchforge
