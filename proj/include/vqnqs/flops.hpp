#pragma once

#include <cstdint>

namespace vqnqs::flops {

// Accounting classes mirror the measurement breakdown: per-location work
// (deduplicable), attention score/mix work (always dense), VQ distance
// computation (always dense), and everything else (gathers, pooling).
enum class Class { PerLocation, Attention, VqDistance, Other };

struct Ledger {
  // Shadow counter: what the same per-location work would cost when applied
  // to all K*T locations instead of the U unique rows.
  int64_t per_location_dense = 0;
  int64_t per_location_unique = 0;
  int64_t attention = 0;
  int64_t vq_distance = 0;
  int64_t other = 0;

  // Subset of the per-location counters restricted to operations downstream
  // of at least one VQ layer in the same block stack. These feed the
  // quantized-ops savings ratio.
  int64_t per_location_dense_quantized = 0;
  int64_t per_location_unique_quantized = 0;

  int64_t total_dense() const {
    return per_location_dense + attention + vq_distance + other;
  }
  int64_t total_dedup() const {
    return per_location_unique + attention + vq_distance + other;
  }

  Ledger& operator+=(const Ledger& o) {
    per_location_dense += o.per_location_dense;
    per_location_unique += o.per_location_unique;
    attention += o.attention;
    vq_distance += o.vq_distance;
    other += o.other;
    per_location_dense_quantized += o.per_location_dense_quantized;
    per_location_unique_quantized += o.per_location_unique_quantized;
    return *this;
  }
};

Ledger* active();

// Makes `ledger` the accumulation target for kernel FLOP logging on this
// thread for the scope's lifetime. Scopes nest; the previous target is
// restored on destruction. Passing nullptr disables logging.
class LedgerScope {
 public:
  explicit LedgerScope(Ledger* ledger);
  ~LedgerScope();
  LedgerScope(const LedgerScope&) = delete;
  LedgerScope& operator=(const LedgerScope&) = delete;

 private:
  Ledger* prev_;
};

// Tags kernel logging with an accounting class. `quantized` marks
// per-location work downstream of a VQ layer.
class ClassScope {
 public:
  explicit ClassScope(Class c, bool quantized = false);
  ~ClassScope();
  ClassScope(const ClassScope&) = delete;
  ClassScope& operator=(const ClassScope&) = delete;

 private:
  Class prev_class_;
  bool prev_quantized_;
};

Class active_class();
bool active_quantized();

// Adds n FLOPs to the active ledger under the active class. No-op when no
// ledger is active.
void log(int64_t n);

// Wraps one per-location segment executed on `actual_rows` rows that stands
// for the same work over `logical_rows` locations. Everything logged inside
// lands in per_location_unique; on exit the dense shadow counter receives
// the per-row cost scaled to logical_rows. The dense path passes
// logical == actual, so shadow equals executed there.
class PerLocationScope {
 public:
  PerLocationScope(int64_t logical_rows, int64_t actual_rows, bool quantized);
  ~PerLocationScope();
  PerLocationScope(const PerLocationScope&) = delete;
  PerLocationScope& operator=(const PerLocationScope&) = delete;

 private:
  ClassScope cls_;
  int64_t logical_, actual_;
  int64_t start_unique_ = 0, start_unique_q_ = 0;
};

}  // namespace vqnqs::flops
