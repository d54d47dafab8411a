#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "smokegen/corpus.hpp"

namespace smokegen::prep {

struct BBoxPrompt {
    std::string image_id;
    long x0 = 0, y0 = 0, w = 0, h = 0;

    /// Positive extents inside a width x height image.
    bool valid_for(std::size_t width, std::size_t height) const;
};

struct DetectionRecord {
    std::string id;
    std::string image_path;
    std::vector<BBoxPrompt> boxes;
};

/// JSONL {id, image_path, bboxes: [{x0, y0, w, h}]}; image paths resolve
/// against the file's directory.
std::vector<DetectionRecord> read_detection_manifest(const std::filesystem::path& path);

class SegmentationClient {
public:
    virtual ~SegmentationClient() = default;
    /// Soft mask at the image's size. May throw TransportError.
    virtual GrayImage segment(const RgbImage& image, const BBoxPrompt& prompt) = 0;
};

class CaptionClient {
public:
    virtual ~CaptionClient() = default;
    virtual std::string caption(const RgbImage& image, int max_tokens) = 0;
    /// Token count under the client's own tokenizer; whitespace by default.
    virtual std::size_t count_tokens(const std::string& text) const;
};

/// Fills the prompt box with 255.
class BoxSegmenter final : public SegmentationClient {
public:
    GrayImage segment(const RgbImage& image, const BBoxPrompt& prompt) override;
};

/// Returns the same text, optionally cut to the token budget.
class FixedCaptioner final : public CaptionClient {
public:
    explicit FixedCaptioner(std::string text, bool truncate = true) : text_(std::move(text)), truncate_(truncate) {}
    std::string caption(const RgbImage& image, int max_tokens) override;

private:
    std::string text_;
    bool truncate_;
};

/// JSON over HTTP: POST {"image_png": base64, "bbox": [x0, y0, w, h]} and
/// read {"mask_png": base64}.
class HttpSegmentationClient final : public SegmentationClient {
public:
    explicit HttpSegmentationClient(std::string endpoint, int timeout_s = 60);
    GrayImage segment(const RgbImage& image, const BBoxPrompt& prompt) override;

private:
    std::string endpoint_;
    int timeout_s_;
};

/// POST {"image_png": base64, "max_tokens": n} and read {"caption": text}.
class HttpCaptionClient final : public CaptionClient {
public:
    explicit HttpCaptionClient(std::string endpoint, int timeout_s = 60);
    std::string caption(const RgbImage& image, int max_tokens) override;

private:
    std::string endpoint_;
    int timeout_s_;
};

struct SegmentOutcome {
    std::optional<BinaryMask> mask;
    std::string reason;  // set when quarantined
};

/// Binarizes the client's mask and checks that it overlaps the prompt box.
SegmentOutcome segment_smoke(const RgbImage& image, const BBoxPrompt& prompt, SegmentationClient& client,
                             int threshold = 128);

/// Non-empty caption within budget after stop-pattern removal, or nullopt
/// after one retry.
std::optional<std::string> caption_image(const RgbImage& image, CaptionClient& client, int max_tokens = 20,
                                         const std::vector<std::string>& stop_patterns = {});

/// Removes every case-insensitive regex match and collapses whitespace.
std::string apply_stop_patterns(const std::string& text, const std::vector<std::string>& patterns);

struct PrepOptions {
    std::filesystem::path out_dir;
    int max_tokens = 20;
    int workers = 1;
    int threshold = 128;
    int transport_retries = 2;
    std::vector<std::string> stop_patterns;
    double val_fraction = 0.1;
    std::optional<std::size_t> limit;  // stop after this many images
};

struct QuarantineEntry {
    std::string id;
    std::string image_id;
    std::string kind;   // empty-mask, no-overlap, empty-caption, bad-box, unreadable, transport
    std::string reason;
    bool permanent = true;
};

struct PrepSummary {
    corpus::Manifest manifest;
    std::size_t added = 0;
    std::size_t skipped = 0;
    std::vector<QuarantineEntry> quarantined;  // this run only
};

using SegFactory = std::function<std::unique_ptr<SegmentationClient>()>;
using CapFactory = std::function<std::unique_ptr<CaptionClient>()>;

/// One sample per (image, box), id "<image id>_<box index>". Writes
/// masks/<id>.png, appends to manifest.jsonl and quarantine.jsonl under
/// out_dir, and skips ids already recorded there on rerun.
PrepSummary build_training_set(const std::vector<DetectionRecord>& records, const SegFactory& seg,
                               const CapFactory& cap, const PrepOptions& opts);

}  // namespace smokegen::prep
