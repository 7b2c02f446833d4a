#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace tokenunlearn {

// Header rows of the CSV artifacts. Cells never contain commas or quotes.
inline constexpr std::string_view kTableHeader =
    "variant,method,weighting,seed,status,steps,token_updates,pre_forget_nll,forget_nll,retain_nll,"
    "forget_exact_match,retain_exact_match,kl_drift,error";
inline constexpr std::string_view kSummaryHeader =
    "variant,n,forget_exact_match_mean,forget_exact_match_std,retain_exact_match_mean,"
    "retain_exact_match_std,forget_nll_mean,forget_nll_std,retain_nll_mean,retain_nll_std,"
    "kl_drift_mean,kl_drift_std";
inline constexpr std::string_view kSnrGridHeader =
    "T,num_critical,rho,r,num_selected,trials,lhs,lhs_half_width,rhs,holds,snr_token,snr_seq,ratio,"
    "predicted";

enum class SchemaKind { Dataset, Report, Table, Summary, SnrGrid };

std::string_view to_string(SchemaKind kind);

struct SchemaIssue {
  std::size_t line = 0;  // 1-based, 0 for file-level problems
  std::string message;
};

struct SchemaResult {
  std::size_t records = 0;
  std::vector<SchemaIssue> issues;

  bool ok() const noexcept { return issues.empty(); }
  /// First few issues joined into one line, for error messages.
  std::string summary() const;
};

/// Dataset JSONL (see datagen.hpp). With vocab_size > 0 token ids are range
/// checked; entity disjointness of the two splits is checked across lines.
SchemaResult validate_dataset_jsonl(std::istream& in, int vocab_size = 0);
/// Run report JSONL: step, epoch, forget_nll, retain_nll, forget_exact_match,
/// retain_exact_match, kl_drift, token_updates, wall_ms.
SchemaResult validate_report_jsonl(std::istream& in);
SchemaResult validate_table_csv(std::istream& in);
SchemaResult validate_summary_csv(std::istream& in);
SchemaResult validate_snr_csv(std::istream& in);

SchemaResult validate(SchemaKind kind, std::istream& in);
/// Throws IoError when the file cannot be opened.
SchemaResult validate_file(SchemaKind kind, const std::filesystem::path& path);

/// Replaces characters that would break a CSV cell.
std::string csv_safe(std::string_view text);

}  // namespace tokenunlearn
