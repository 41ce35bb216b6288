#include "natstream/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

namespace natstream::metrics {

namespace {

void check_record(const DelayRecord& rec, const char* op) {
  if (rec.delays.empty()) {
    throw std::runtime_error(std::string(op) + " is undefined for an empty hypothesis");
  }
  if (rec.ref_len < 1) {
    throw std::runtime_error(std::string(op) + " is undefined for an empty reference");
  }
  if (rec.src_ms <= 0.0) {
    throw std::runtime_error(std::string(op) + ": src_ms must be positive");
  }
}

// First 1-based t with d(t) >= src_ms, or hyp_len when no token waited for
// the full source.
int cutoff(const DelayRecord& rec) {
  for (int t = 1; t <= rec.hyp_len(); ++t) {
    if (rec.delays[static_cast<size_t>(t - 1)] >= rec.src_ms) return t;
  }
  return rec.hyp_len();
}

double lagging(const DelayRecord& rec, double gamma) {
  const int tau = cutoff(rec);
  double sum = 0.0;
  for (int t = 1; t <= tau; ++t) {
    sum += rec.delays[static_cast<size_t>(t - 1)] - (t - 1) * gamma;
  }
  return sum / tau;
}

}  // namespace

DelayRecord delay_record(const InstanceLog& log, Stream stream, bool computation_aware) {
  DelayRecord rec;
  rec.src_ms = static_cast<double>(log.src_ms);
  rec.ref_len = static_cast<int>(stream == Stream::text ? log.ref_text.size()
                                                        : log.ref_units.size());
  for (const EmissionEvent& e : log.events) {
    if (e.stream != stream) continue;
    rec.delays.push_back(computation_aware ? e.wall_ms : static_cast<double>(e.src_ms));
  }
  return rec;
}

double al(const DelayRecord& rec) {
  check_record(rec, "al");
  return lagging(rec, rec.src_ms / rec.ref_len);
}

double ap(const DelayRecord& rec) {
  check_record(rec, "ap");
  double sum = 0.0;
  for (double d : rec.delays) sum += d;
  return sum / (static_cast<double>(rec.hyp_len()) * rec.src_ms);
}

double dal(const DelayRecord& rec) {
  check_record(rec, "dal");
  const double gamma = rec.src_ms / rec.hyp_len();
  double prev = -gamma;  // so that d'(1) = max(d(1), 0)... d(1) > 0 always wins
  double sum = 0.0;
  for (int t = 1; t <= rec.hyp_len(); ++t) {
    const double dp = std::max(rec.delays[static_cast<size_t>(t - 1)], prev + gamma);
    sum += dp - (t - 1) * gamma;
    prev = dp;
  }
  return sum / rec.hyp_len();
}

double laal(const DelayRecord& rec) {
  check_record(rec, "laal");
  return lagging(rec, rec.src_ms / std::max(rec.hyp_len(), rec.ref_len));
}

OffsetStats offsets_and_discontinuities(const InstanceLog& log, bool computation_aware,
                                        double unit_ms) {
  OffsetStats stats;
  PlaybackSchedule schedule = playback_schedule(log, computation_aware, unit_ms);
  if (schedule.segments.empty()) return stats;
  stats.has_units = true;
  stats.start_offset = schedule.segments.front().start_ms;
  stats.end_offset = schedule.segments.back().end_ms - static_cast<double>(log.src_ms);
  stats.dc_num = schedule.discontinuity_count;
  stats.dc_sum = schedule.discontinuity_total_ms;
  stats.dc_ave = stats.dc_num > 0 ? stats.dc_sum / stats.dc_num : 0.0;
  return stats;
}

double act(const std::vector<InstanceLog>& logs) {
  double total = 0.0;
  int64_t chunks = 0;
  for (const InstanceLog& log : logs) {
    for (double ms : log.chunk_compute_ms) {
      total += ms;
      chunks += 1;
    }
  }
  return chunks > 0 ? total / static_cast<double>(chunks) : 0.0;
}

double corpus_bleu(const std::vector<std::vector<int>>& hyps,
                   const std::vector<std::vector<int>>& refs, int max_n) {
  if (hyps.size() != refs.size()) {
    throw std::runtime_error("corpus_bleu: " + std::to_string(hyps.size()) +
                             " hypotheses vs " + std::to_string(refs.size()) + " references");
  }
  if (hyps.empty()) throw std::runtime_error("corpus_bleu: empty corpus");
  if (max_n < 1) throw std::runtime_error("corpus_bleu: max_n must be >= 1");

  int64_t hyp_total = 0, ref_total = 0;
  std::vector<int64_t> matches(static_cast<size_t>(max_n), 0);
  std::vector<int64_t> totals(static_cast<size_t>(max_n), 0);
  for (size_t i = 0; i < hyps.size(); ++i) {
    const std::vector<int>& hyp = hyps[i];
    const std::vector<int>& ref = refs[i];
    hyp_total += static_cast<int64_t>(hyp.size());
    ref_total += static_cast<int64_t>(ref.size());
    for (int n = 1; n <= max_n; ++n) {
      std::map<std::vector<int>, int> ref_counts;
      for (size_t s = 0; s + n <= ref.size(); ++s) {
        ref_counts[std::vector<int>(ref.begin() + s, ref.begin() + s + n)] += 1;
      }
      std::map<std::vector<int>, int> hyp_counts;
      for (size_t s = 0; s + n <= hyp.size(); ++s) {
        hyp_counts[std::vector<int>(hyp.begin() + s, hyp.begin() + s + n)] += 1;
      }
      for (const auto& [gram, count] : hyp_counts) {
        const auto it = ref_counts.find(gram);
        const int clip = it == ref_counts.end() ? 0 : it->second;
        matches[static_cast<size_t>(n - 1)] += std::min(count, clip);
      }
      if (hyp.size() + 1 > static_cast<size_t>(n)) {
        totals[static_cast<size_t>(n - 1)] += static_cast<int64_t>(hyp.size()) - n + 1;
      }
    }
  }
  if (hyp_total == 0) return 0.0;

  const double eps = 1e-9;
  double log_sum = 0.0;
  for (int n = 0; n < max_n; ++n) {
    log_sum += std::log((static_cast<double>(matches[static_cast<size_t>(n)]) + eps) /
                        (static_cast<double>(totals[static_cast<size_t>(n)]) + eps));
  }
  const double bp = hyp_total < ref_total
                        ? std::exp(1.0 - static_cast<double>(ref_total) /
                                             static_cast<double>(hyp_total))
                        : 1.0;
  return 100.0 * bp * std::exp(log_sum / max_n);
}

LatencySummary summarize_latency(const std::vector<InstanceLog>& logs, Stream stream) {
  LatencySummary out;
  for (const InstanceLog& log : logs) {
    DelayRecord nca = delay_record(log, stream, /*computation_aware=*/false);
    if (nca.delays.empty() || nca.ref_len < 1) {
      out.empty_excluded += 1;
      continue;
    }
    DelayRecord ca = delay_record(log, stream, /*computation_aware=*/true);
    out.counted += 1;
    out.al += al(nca);
    out.ap += ap(nca);
    out.dal += dal(nca);
    out.laal += laal(nca);
    out.al_ca += al(ca);
    out.ap_ca += ap(ca);
    out.dal_ca += dal(ca);
    out.laal_ca += laal(ca);
  }
  if (out.counted > 0) {
    const double inv = 1.0 / out.counted;
    out.al *= inv;
    out.ap *= inv;
    out.dal *= inv;
    out.laal *= inv;
    out.al_ca *= inv;
    out.ap_ca *= inv;
    out.dal_ca *= inv;
    out.laal_ca *= inv;
  }
  return out;
}

SpeechSummary summarize_speech(const std::vector<InstanceLog>& logs, double unit_ms) {
  SpeechSummary out;
  int64_t gaps = 0;
  double gap_ms = 0.0;
  for (const InstanceLog& log : logs) {
    OffsetStats nca = offsets_and_discontinuities(log, /*computation_aware=*/false, unit_ms);
    if (!nca.has_units) {
      out.empty_excluded += 1;
      continue;
    }
    OffsetStats ca = offsets_and_discontinuities(log, /*computation_aware=*/true, unit_ms);
    out.counted += 1;
    out.start_offset += nca.start_offset;
    out.end_offset += nca.end_offset;
    out.start_offset_ca += ca.start_offset;
    out.end_offset_ca += ca.end_offset;
    out.dc_num += nca.dc_num;
    out.dc_sum += nca.dc_sum;
    gaps += nca.dc_num;
    gap_ms += nca.dc_sum;
  }
  if (out.counted > 0) {
    const double inv = 1.0 / out.counted;
    out.start_offset *= inv;
    out.end_offset *= inv;
    out.start_offset_ca *= inv;
    out.end_offset_ca *= inv;
    out.dc_num *= inv;
    out.dc_sum *= inv;
  }
  out.dc_ave = gaps > 0 ? gap_ms / static_cast<double>(gaps) : 0.0;
  return out;
}

QualitySummary summarize_quality(const std::vector<InstanceLog>& logs) {
  QualitySummary out;
  if (logs.empty()) return out;
  std::vector<std::vector<int>> text_hyps, text_refs, unit_hyps, unit_refs;
  int exact = 0;
  for (const InstanceLog& log : logs) {
    std::vector<int> text = log.tokens(Stream::text);
    if (text == log.ref_text) exact += 1;
    text_hyps.push_back(std::move(text));
    text_refs.push_back(log.ref_text);
    unit_hyps.push_back(log.tokens(Stream::unit));
    unit_refs.push_back(log.ref_units);
  }
  out.count = static_cast<int>(logs.size());
  out.text_bleu = corpus_bleu(text_hyps, text_refs);
  out.unit_bleu = corpus_bleu(unit_hyps, unit_refs);
  out.text_exact = static_cast<double>(exact) / out.count;
  return out;
}

EvalReport evaluate_logs(const std::vector<InstanceLog>& logs) {
  if (logs.empty()) throw std::runtime_error("evaluate_logs: no instance logs");
  EvalReport report;
  report.instances = static_cast<int>(logs.size());
  report.quality = summarize_quality(logs);
  report.text_latency = summarize_latency(logs, Stream::text);
  report.unit_latency = summarize_latency(logs, Stream::unit);
  report.speech = summarize_speech(logs);
  report.act_ms = act(logs);
  return report;
}

std::string report_text(const EvalReport& r) {
  std::ostringstream out;
  out << "instances: " << r.instances << "\n";
  out << "quality: text_bleu=" << r.quality.text_bleu << " unit_bleu=" << r.quality.unit_bleu
      << " text_exact=" << r.quality.text_exact << "\n";
  out << "text latency (counted " << r.text_latency.counted << ", empty "
      << r.text_latency.empty_excluded << "): al=" << r.text_latency.al
      << " laal=" << r.text_latency.laal << " ap=" << r.text_latency.ap
      << " dal=" << r.text_latency.dal << " al_ca=" << r.text_latency.al_ca << "\n";
  out << "unit latency (counted " << r.unit_latency.counted << ", empty "
      << r.unit_latency.empty_excluded << "): al=" << r.unit_latency.al
      << " laal=" << r.unit_latency.laal << " ap=" << r.unit_latency.ap
      << " dal=" << r.unit_latency.dal << " al_ca=" << r.unit_latency.al_ca << "\n";
  out << "speech (counted " << r.speech.counted << ", empty " << r.speech.empty_excluded
      << "): start_offset=" << r.speech.start_offset << " end_offset=" << r.speech.end_offset
      << " dc_num=" << r.speech.dc_num << " dc_ave=" << r.speech.dc_ave
      << " dc_sum=" << r.speech.dc_sum << " start_offset_ca=" << r.speech.start_offset_ca
      << "\n";
  out << "act_ms: " << r.act_ms << "\n";
  return out.str();
}

std::string report_csv_header() { return "policy,chunk_ms,k,metric,value\n"; }

std::string report_csv_rows(const EvalReport& r, const std::string& policy_label, int chunk_ms,
                            int lookahead_chunks) {
  std::ostringstream out;
  auto row = [&](const char* metric, double value) {
    out << policy_label << ',' << chunk_ms << ',' << lookahead_chunks << ',' << metric << ','
        << value << "\n";
  };
  row("text_bleu", r.quality.text_bleu);
  row("unit_bleu", r.quality.unit_bleu);
  row("text_exact", r.quality.text_exact);
  row("text_al", r.text_latency.al);
  row("text_laal", r.text_latency.laal);
  row("text_ap", r.text_latency.ap);
  row("text_dal", r.text_latency.dal);
  row("text_al_ca", r.text_latency.al_ca);
  row("unit_al", r.unit_latency.al);
  row("unit_laal", r.unit_latency.laal);
  row("unit_ap", r.unit_latency.ap);
  row("unit_dal", r.unit_latency.dal);
  row("unit_al_ca", r.unit_latency.al_ca);
  row("start_offset", r.speech.start_offset);
  row("end_offset", r.speech.end_offset);
  row("dc_num", r.speech.dc_num);
  row("dc_ave", r.speech.dc_ave);
  row("dc_sum", r.speech.dc_sum);
  row("act_ms", r.act_ms);
  return out.str();
}

}  // namespace natstream::metrics
