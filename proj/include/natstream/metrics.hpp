#pragma once

#include <string>
#include <vector>

#include "natstream/stream.hpp"

namespace natstream::metrics {

// Ordered emission delays of one utterance on one stream. delays holds the
// source-consumed stamps (non-computation-aware) or wall stamps
// (computation-aware, unclipped) of the emitted tokens, in emission order.
struct DelayRecord {
  std::vector<double> delays;
  double src_ms = 0.0;
  int ref_len = 0;

  int hyp_len() const { return static_cast<int>(delays.size()); }
};

DelayRecord delay_record(const InstanceLog& log, Stream stream, bool computation_aware);

// Average lagging: gamma* = src_ms/ref_len; tau = first t with
// d(t) >= src_ms (hyp_len if none); mean over t <= tau of d(t) - (t-1)gamma*.
// All four throw on an empty hypothesis or reference.
double al(const DelayRecord& rec);
// Average proportion: sum of delays / (hyp_len * src_ms).
double ap(const DelayRecord& rec);
// Differentiable average lagging: gamma = src_ms/hyp_len, running max
// d'(t) = max(d(t), d'(t-1)+gamma), mean of d'(t) - (t-1)gamma over all t.
double dal(const DelayRecord& rec);
// Length-adaptive AL: gamma = src_ms/max(hyp_len, ref_len), same tau as al.
double laal(const DelayRecord& rec);

// Unit playback offsets and discontinuities for one utterance.
// StartOffset = playback start of the first audio; EndOffset = final
// playback end minus src_ms; DC stats count the positive gaps between
// consecutive non-empty chunks. has_units is false when nothing was emitted.
struct OffsetStats {
  bool has_units = false;
  double start_offset = 0.0;
  double end_offset = 0.0;
  int dc_num = 0;
  double dc_sum = 0.0;
  double dc_ave = 0.0;  // dc_sum/dc_num, 0 when there are no gaps
};
OffsetStats offsets_and_discontinuities(const InstanceLog& log, bool computation_aware,
                                        double unit_ms = 20.0);

// Mean per-chunk computation time over every chunk of every log (0 when no
// chunks were decoded).
double act(const std::vector<InstanceLog>& logs);

// Corpus BLEU over token-id sequences: clipped n-gram precisions (n <= max_n),
// add-epsilon smoothing, brevity penalty exp(1 - r/c) when c < r, scaled to
// 0..100. Throws on an empty corpus or mismatched sizes.
double corpus_bleu(const std::vector<std::vector<int>>& hyps,
                   const std::vector<std::vector<int>>& refs, int max_n = 4);

// Corpus means over instances with a non-empty hypothesis; instances with an
// empty hypothesis (or empty reference) are excluded and counted.
struct LatencySummary {
  int counted = 0;
  int empty_excluded = 0;
  double al = 0.0, ap = 0.0, dal = 0.0, laal = 0.0;
  double al_ca = 0.0, ap_ca = 0.0, dal_ca = 0.0, laal_ca = 0.0;
};
LatencySummary summarize_latency(const std::vector<InstanceLog>& logs, Stream stream);

// Speech-side playback statistics. start/end offsets and per-utterance gap
// counts are means over counted instances; dc_ave averages gap length over
// every gap in the corpus.
struct SpeechSummary {
  int counted = 0;
  int empty_excluded = 0;
  double start_offset = 0.0, end_offset = 0.0;
  double start_offset_ca = 0.0, end_offset_ca = 0.0;
  double dc_num = 0.0, dc_sum = 0.0, dc_ave = 0.0;
};
SpeechSummary summarize_speech(const std::vector<InstanceLog>& logs, double unit_ms = 20.0);

struct QualitySummary {
  int count = 0;
  double text_bleu = 0.0;
  double unit_bleu = 0.0;
  double text_exact = 0.0;  // fraction of hypotheses equal to the reference
};
QualitySummary summarize_quality(const std::vector<InstanceLog>& logs);

struct EvalReport {
  int instances = 0;
  QualitySummary quality;
  LatencySummary text_latency;
  LatencySummary unit_latency;
  SpeechSummary speech;
  double act_ms = 0.0;
};
EvalReport evaluate_logs(const std::vector<InstanceLog>& logs);

std::string report_text(const EvalReport& report);
// Long-format CSV rows "policy,chunk_ms,k,metric,value" for curve plotting;
// one row per metric.
std::string report_csv_header();
std::string report_csv_rows(const EvalReport& report, const std::string& policy_label, int chunk_ms,
                            int lookahead_chunks);

}  // namespace natstream::metrics
