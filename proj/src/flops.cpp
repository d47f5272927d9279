#include "vqnqs/flops.hpp"

namespace vqnqs::flops {

namespace {
thread_local Ledger* g_active = nullptr;
thread_local Class g_class = Class::Other;
thread_local bool g_quantized = false;
}  // namespace

Ledger* active() { return g_active; }

LedgerScope::LedgerScope(Ledger* ledger) : prev_(g_active) { g_active = ledger; }
LedgerScope::~LedgerScope() { g_active = prev_; }

ClassScope::ClassScope(Class c, bool quantized)
    : prev_class_(g_class), prev_quantized_(g_quantized) {
  g_class = c;
  g_quantized = quantized;
}
ClassScope::~ClassScope() {
  g_class = prev_class_;
  g_quantized = prev_quantized_;
}

Class active_class() { return g_class; }
bool active_quantized() { return g_quantized; }

PerLocationScope::PerLocationScope(int64_t logical_rows, int64_t actual_rows,
                                   bool quantized)
    : cls_(Class::PerLocation, quantized),
      logical_(logical_rows),
      actual_(actual_rows) {
  if (g_active) {
    start_unique_ = g_active->per_location_unique;
    start_unique_q_ = g_active->per_location_unique_quantized;
  }
}

PerLocationScope::~PerLocationScope() {
  if (!g_active) return;
  const int64_t delta = g_active->per_location_unique - start_unique_;
  const int64_t delta_q =
      g_active->per_location_unique_quantized - start_unique_q_;
  // per-location cost must be an integer multiple of the row count
  if (actual_ > 0 && delta % actual_ == 0) {
    g_active->per_location_dense += delta / actual_ * logical_;
    g_active->per_location_dense_quantized += delta_q / actual_ * logical_;
  } else {
    g_active->per_location_dense += delta;
    g_active->per_location_dense_quantized += delta_q;
  }
}

void log(int64_t n) {
  if (!g_active) return;
  switch (g_class) {
    case Class::PerLocation:
      g_active->per_location_unique += n;
      if (g_quantized) g_active->per_location_unique_quantized += n;
      break;
    case Class::Attention:
      g_active->attention += n;
      break;
    case Class::VqDistance:
      g_active->vq_distance += n;
      break;
    case Class::Other:
      g_active->other += n;
      break;
  }
}

}  // namespace vqnqs::flops
