#pragma once

// Fingerprint-bit decision machinery: binarization, bit error rate, and the
// false-alarm threshold. The threshold search runs on exact big-integer
// binomial sums, so results are identical to brute-force enumeration at
// every k — no underflow or rounding at k = 256.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fitprint {

using Bits = std::vector<int>;  // entries are exactly -1 or +1

// sign(v >= 0) = +1, sign(v < 0) = -1.
inline Bits binarize(const std::vector<double>& v) {
  Bits out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw std::invalid_argument("binarize: non-finite entry at index " +
                                  std::to_string(i));
    }
    out[i] = v[i] >= 0.0 ? 1 : -1;
  }
  return out;
}

inline double ber(const Bits& a, const Bits& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("ber: length mismatch " +
                                std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
  }
  if (a.empty()) {
    throw std::invalid_argument("ber: empty bit vectors");
  }
  std::size_t diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) ++diff;
  }
  return static_cast<double>(diff) / static_cast<double>(a.size());
}

namespace detail {

// Minimal unsigned big integer: only what exact binomial tails need.
class BigUint {
 public:
  BigUint() = default;
  explicit BigUint(std::uint64_t v) {
    if (v) words_.push_back(v);
  }

  BigUint& operator+=(const BigUint& o) {
    const std::size_t n = std::max(words_.size(), o.words_.size());
    words_.resize(n, 0);
    unsigned __int128 carry = 0;
    for (std::size_t i = 0; i < n; ++i) {
      unsigned __int128 s = carry + words_[i];
      if (i < o.words_.size()) s += o.words_[i];
      words_[i] = static_cast<std::uint64_t>(s);
      carry = s >> 64;
    }
    if (carry) words_.push_back(static_cast<std::uint64_t>(carry));
    return *this;
  }

  BigUint shifted_left(std::size_t bits) const {
    if (words_.empty()) return {};
    const std::size_t word_shift = bits / 64, bit_shift = bits % 64;
    BigUint out;
    out.words_.assign(words_.size() + word_shift + 1, 0);
    for (std::size_t i = 0; i < words_.size(); ++i) {
      out.words_[i + word_shift] |= words_[i] << bit_shift;
      if (bit_shift) {
        out.words_[i + word_shift + 1] |= words_[i] >> (64 - bit_shift);
      }
    }
    out.trim();
    return out;
  }

  bool operator<=(const BigUint& o) const {
    if (words_.size() != o.words_.size()) {
      return words_.size() < o.words_.size();
    }
    for (std::size_t i = words_.size(); i-- > 0;) {
      if (words_[i] != o.words_[i]) return words_[i] < o.words_[i];
    }
    return true;
  }

  long double to_long_double() const {
    long double r = 0.0L;
    for (std::size_t i = words_.size(); i-- > 0;) {
      r = r * 18446744073709551616.0L + static_cast<long double>(words_[i]);
    }
    return r;
  }

 private:
  void trim() {
    while (!words_.empty() && words_.back() == 0) words_.pop_back();
  }

  std::vector<std::uint64_t> words_;  // little-endian 64-bit limbs
};

// Pascal row: C(k, 0..k) as exact integers.
inline std::vector<BigUint> binomial_row(std::size_t k) {
  std::vector<BigUint> row{BigUint(1)};
  for (std::size_t n = 1; n <= k; ++n) {
    std::vector<BigUint> next(n + 1);
    next[0] = BigUint(1);
    next[n] = BigUint(1);
    for (std::size_t d = 1; d < n; ++d) {
      next[d] = row[d - 1];
      next[d] += row[d];
    }
    row = std::move(next);
  }
  return row;
}

// Exact comparison  sum_{d<=D} C(k,d) / 2^k  <=  kappa  for a double kappa:
// kappa = m * 2^(e-53) with integer m, so the inequality becomes an integer
// comparison after shifting whichever side has the positive exponent.
inline bool tail_leq(const BigUint& tail_sum, std::size_t k, double kappa) {
  int e = 0;
  const double frac = std::frexp(kappa, &e);  // kappa = frac * 2^e
  const auto m = static_cast<std::uint64_t>(std::ldexp(frac, 53));
  const BigUint mantissa(m);
  const long long shift = static_cast<long long>(e) - 53 +
                          static_cast<long long>(k);
  if (shift >= 0) {
    return tail_sum <= mantissa.shifted_left(static_cast<std::size_t>(shift));
  }
  return tail_sum.shifted_left(static_cast<std::size_t>(-shift)) <= mantissa;
}

}  // namespace detail

// Exact false-alarm probability sum_{d=0}^{floor(tau*k)} C(k,d) * 2^-k,
// returned as the nearest double.
inline double false_alarm_prob(std::size_t k, double tau) {
  if (k == 0) {
    throw std::invalid_argument("false_alarm_prob: k must be >= 1");
  }
  if (!(tau >= 0.0 && tau <= 1.0)) {
    throw std::invalid_argument("false_alarm_prob: tau must be in [0,1]");
  }
  const auto dmax = static_cast<std::size_t>(
      std::floor(tau * static_cast<double>(k) + 1e-9));
  const auto row = detail::binomial_row(k);
  detail::BigUint sum;
  for (std::size_t d = 0; d <= dmax && d <= k; ++d) sum += row[d];
  const long double denom = std::pow(2.0L, static_cast<long double>(k));
  return static_cast<double>(sum.to_long_double() / denom);
}

// Largest tau = d*/k with exact tail probability <= kappa.
inline double solve_threshold(std::size_t k, double kappa) {
  if (k == 0) {
    throw std::invalid_argument("solve_threshold: k must be >= 1");
  }
  if (!(kappa > 0.0 && kappa < 1.0)) {
    throw std::invalid_argument("solve_threshold: kappa must be in (0,1)");
  }
  const auto row = detail::binomial_row(k);
  detail::BigUint sum;
  std::optional<std::size_t> best;
  for (std::size_t d = 0; d <= k; ++d) {
    sum += row[d];
    if (detail::tail_leq(sum, k, kappa)) {
      best = d;
    } else {
      break;  // tails only grow
    }
  }
  if (!best) {
    std::ostringstream os;
    os << "solve_threshold: kappa " << kappa << " unachievable at k=" << k
       << " (minimum false-alarm probability is 2^-" << k << ")";
    throw std::invalid_argument(os.str());
  }
  return static_cast<double>(*best) / static_cast<double>(k);
}

// ---- decision report ----------------------------------------------------

enum class TimestampCheck { pass, fail, not_applicable };

struct VerificationReport {
  Bits extracted;
  double ber_value = 1.0;
  double tau = 0.0;
  double kappa = 0.0;
  TimestampCheck timestamp_check = TimestampCheck::not_applicable;
  bool reused = false;  // decision: reused iff ber <= tau and timestamps ok

  std::string to_text() const {
    std::ostringstream os;
    os << "ber: " << ber_value << "\n";
    os << "tau: " << tau << "\n";
    os << "kappa: " << kappa << "\n";
    os << "timestamp_check: "
       << (timestamp_check == TimestampCheck::pass ? "pass"
           : timestamp_check == TimestampCheck::fail ? "fail"
                                                     : "n/a")
       << "\n";
    os << "decision: " << (reused ? "reused" : "independent") << "\n";
    os << "bits:";
    for (int b : extracted) os << ' ' << (b > 0 ? "+1" : "-1");
    os << "\n";
    return os.str();
  }
};

// Assembles the decision from an extracted fingerprint vector. Registration
// order, when known, is given as logical sequence numbers; the claim fails
// outright if the package was registered after the suspect model.
inline VerificationReport decide(const std::vector<double>& v,
                                 const Bits& target, double kappa,
                                 std::optional<std::int64_t> package_seq = {},
                                 std::optional<std::int64_t> suspect_seq = {}) {
  VerificationReport rep;
  rep.extracted = binarize(v);
  rep.ber_value = ber(rep.extracted, target);
  rep.kappa = kappa;
  rep.tau = solve_threshold(target.size(), kappa);
  if (package_seq && suspect_seq) {
    rep.timestamp_check = *package_seq > *suspect_seq ? TimestampCheck::fail
                                                      : TimestampCheck::pass;
  }
  rep.reused = rep.ber_value <= rep.tau &&
               rep.timestamp_check != TimestampCheck::fail;
  return rep;
}

}  // namespace fitprint
