#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "smokegen/image.hpp"
#include "smokegen/mask.hpp"

namespace smokegen::corpus {

enum class Source { real, synthetic, background };
enum class Split { train, val, test };

std::string to_string(Source s);
std::string to_string(Split s);
Source parse_source(const std::string& s);
Split parse_split(const std::string& s);

/// One (image, mask, caption) triple. A missing mask marks a smoke-free image.
struct SmokeSample {
    std::string id;
    std::string image_path;
    std::optional<std::string> mask_path;
    std::string caption;
    Source source = Source::real;
    Split split = Split::train;

    bool positive() const { return mask_path.has_value(); }
    bool operator==(const SmokeSample&) const = default;
};

/// Ordered records. Relative paths resolve against `base_dir`, normally the
/// directory holding the manifest file. The JSONL encoding carries no
/// version line; `schema_version` is fixed by this build.
struct Manifest {
    static constexpr int kSchemaVersion = 1;

    std::vector<SmokeSample> records;
    int schema_version = kSchemaVersion;
    std::filesystem::path base_dir;

    std::filesystem::path resolve(const std::string& path) const;
    const SmokeSample* find(const std::string& id) const;
    std::size_t size() const { return records.size(); }
};

std::string to_jsonl_line(const SmokeSample& s);
SmokeSample parse_jsonl_line(const std::string& line);
std::string serialize_manifest(const Manifest& m);
Manifest parse_manifest(const std::string& text, std::filesystem::path base_dir = {});
Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const Manifest& m, const std::filesystem::path& path);
/// Single-writer durable append of one record.
void append_record(const SmokeSample& s, const std::filesystem::path& path);

// ---- masks and boxes --------------------------------------------------

/// bits = 1 iff raster >= threshold.
BinaryMask binarize_mask(const GrayImage& raster, int threshold = 128);
BinaryMask load_mask(const std::filesystem::path& path, int threshold = 128);
void save_mask(const BinaryMask& mask, const std::filesystem::path& path);

enum class Connectivity { four = 4, eight = 8 };

struct PixelRect {
    std::size_t x0 = 0, y0 = 0, w = 0, h = 0;
    bool operator==(const PixelRect&) const = default;
};

/// Tight bbox of the component with the most pixels. Equal sizes go to the
/// component whose first pixel comes first in row-major order.
PixelRect largest_component_bbox(const BinaryMask& mask, Connectivity connectivity = Connectivity::eight);

struct DetectionLabel {
    int class_id = 0;
    double cx = 0, cy = 0, w = 0, h = 0;
};

DetectionLabel to_yolo_label(const PixelRect& box, std::size_t image_w, std::size_t image_h, int class_id = 0);
PixelRect from_yolo_label(const DetectionLabel& label, std::size_t image_w, std::size_t image_h);
/// "class cx cy w h", 6 decimals, no trailing newline.
std::string format_yolo_line(const DetectionLabel& label);

// ---- dataset assembly -------------------------------------------------

struct Ratio {
    unsigned first = 1;
    unsigned second = 1;
};

Ratio parse_ratio(const std::string& text);  // "1:1"

/// Draws records from `real` and `synthetic` so that the real:synthetic and
/// positive:negative proportions both hold (each within one record), using
/// as many records as possible unless `target_total` is given. Positives are
/// records carrying a mask; negatives are mask-free frames.
Manifest mix_datasets(const Manifest& real, const Manifest& synthetic, Ratio real_synth, Ratio pos_neg,
                      std::uint64_t seed, std::optional<std::size_t> target_total = std::nullopt);

struct Violation {
    std::string code;     // duplicate-id, empty-caption, missing-image, missing-mask, dim-mismatch, ...
    std::string subject;  // id or path the violation is about
    std::string message;
};

std::vector<Violation> validate_manifest(const Manifest& m, bool check_files = true);

struct ExportOptions {
    Connectivity connectivity = Connectivity::eight;
    int class_id = 0;
    std::string class_name = "smoke";
    int threshold = 128;
};

struct ExportSummary {
    std::size_t images = 0;
    std::size_t positives = 0;
    std::size_t negatives = 0;
    std::vector<std::string> empty_masks;  // positives whose mask had no foreground
};

/// images/<id>.jpg, labels/<id>.txt, <split>.txt lists and dataset.yaml.
ExportSummary export_yolo(const Manifest& m, const std::filesystem::path& out_dir, const ExportOptions& opts = {});

}  // namespace smokegen::corpus
