#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "resgcn/common.hpp"
#include "resgcn/tensor.hpp"

namespace resgcn {

constexpr int kNumJoints = 25;
constexpr int kMaxBodies = 2;
constexpr int kDefaultFrames = 300;

// Raw 3D joint trajectories for up to two bodies. Frames at index
// >= valid_frames are zero in every channel; an all-zero body block means the
// body is absent.
struct SkeletonSequence {
    Tensor coords;  // [3, T, V, M]
    int valid_frames = 0;
    int label = -1;

    int frames() const { return coords.dim(1); }
    int joints() const { return coords.dim(2); }
    int bodies() const { return coords.dim(3); }

    bool body_present(int m) const {
        for (int c = 0; c < 3; ++c)
            for (int t = 0; t < frames(); ++t)
                for (int v = 0; v < joints(); ++v)
                    if (coords.at(c, t, v, m) != 0.0) return true;
        return false;
    }
};

namespace detail {

// Whitespace tokenizer that remembers line numbers for error reporting.
class LineReader {
public:
    explicit LineReader(std::istream& in) : in_(in) {}

    int line() const { return line_; }

    std::string next_token() {
        for (;;) {
            if (pos_ < tokens_.size()) return tokens_[pos_++];
            std::string text;
            if (!std::getline(in_, text))
                throw parse_error("line " + std::to_string(line_ + 1) + ": unexpected end of input");
            ++line_;
            tokens_.clear();
            pos_ = 0;
            std::istringstream ss(text);
            std::string tok;
            while (ss >> tok) tokens_.push_back(tok);
        }
    }

    double next_double() {
        const std::string tok = next_token();
        try {
            std::size_t used = 0;
            const double v = std::stod(tok, &used);
            if (used != tok.size()) throw std::invalid_argument(tok);
            return v;
        } catch (const std::exception&) {
            throw parse_error("line " + std::to_string(line_) + ": expected a number, got '" + tok + "'");
        }
    }

    long long next_int() {
        const std::string tok = next_token();
        try {
            std::size_t used = 0;
            const long long v = std::stoll(tok, &used);
            if (used != tok.size()) throw std::invalid_argument(tok);
            return v;
        } catch (const std::exception&) {
            throw parse_error("line " + std::to_string(line_) + ": expected an integer, got '" + tok + "'");
        }
    }

private:
    std::istream& in_;
    std::vector<std::string> tokens_;
    std::size_t pos_ = 0;
    int line_ = 0;
};

}  // namespace detail

// Parses the NTU .skeleton text layout: a frame count, then per frame a body
// count and per body one metadata line, a joint-count line and 25 joint lines
// whose first three fields are x,y,z in meters. When more than two bodies are
// tracked, the two with the highest total motion energy are kept (ties broken
// by body id).
inline SkeletonSequence parse_ntu_skeleton(std::istream& in) {
    detail::LineReader rd(in);
    const long long frame_count = rd.next_int();
    if (frame_count < 1)
        throw parse_error("line " + std::to_string(rd.line()) + ": frame count must be positive, got " +
                          std::to_string(frame_count));
    const int T = static_cast<int>(frame_count);

    struct Track {
        // joints[t] empty until the body shows up in frame t
        std::vector<std::vector<double>> joints;
        int first_seen = 0;
    };
    std::map<long long, Track> tracks;

    for (int t = 0; t < T; ++t) {
        const long long bodies = rd.next_int();
        if (bodies < 0)
            throw parse_error("line " + std::to_string(rd.line()) + ": negative body count");
        for (long long b = 0; b < bodies; ++b) {
            const long long body_id = rd.next_int();
            for (int f = 0; f < 9; ++f) rd.next_double();  // tracking metadata
            const long long joint_count = rd.next_int();
            if (joint_count != kNumJoints)
                throw parse_error("line " + std::to_string(rd.line()) + ": expected " +
                                  std::to_string(kNumJoints) + " joints, got " + std::to_string(joint_count));
            auto [it, fresh] = tracks.try_emplace(body_id);
            Track& trk = it->second;
            if (fresh) {
                trk.joints.assign(static_cast<std::size_t>(T), {});
                trk.first_seen = t;
            }
            auto& frame = trk.joints[static_cast<std::size_t>(t)];
            frame.assign(kNumJoints * 3, 0.0);
            for (int v = 0; v < kNumJoints; ++v) {
                for (int c = 0; c < 3; ++c) frame[static_cast<std::size_t>(v) * 3 + c] = rd.next_double();
                for (int f = 0; f < 9; ++f) rd.next_double();  // depth/color/orientation/state
            }
        }
    }

    // Rank bodies by total motion energy (sum of squared displacement over
    // consecutive frames where the body is present), ties by ascending id.
    std::vector<std::pair<double, long long>> ranked;
    for (const auto& [id, trk] : tracks) {
        double energy = 0.0;
        for (int t = 0; t + 1 < T; ++t) {
            const auto& a = trk.joints[static_cast<std::size_t>(t)];
            const auto& b = trk.joints[static_cast<std::size_t>(t) + 1];
            if (a.empty() || b.empty()) continue;
            for (std::size_t i = 0; i < a.size(); ++i) {
                const double d = b[i] - a[i];
                energy += d * d;
            }
        }
        ranked.emplace_back(energy, id);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });

    SkeletonSequence seq;
    seq.coords = Tensor({3, T, kNumJoints, kMaxBodies});
    seq.valid_frames = T;
    const int keep = std::min<int>(kMaxBodies, static_cast<int>(ranked.size()));
    for (int m = 0; m < keep; ++m) {
        const Track& trk = tracks.at(ranked[static_cast<std::size_t>(m)].second);
        for (int t = 0; t < T; ++t) {
            const auto& frame = trk.joints[static_cast<std::size_t>(t)];
            if (frame.empty()) continue;
            for (int v = 0; v < kNumJoints; ++v)
                for (int c = 0; c < 3; ++c)
                    seq.coords.at(c, t, v, m) = frame[static_cast<std::size_t>(v) * 3 + c];
        }
    }
    return seq;
}

inline SkeletonSequence parse_ntu_skeleton_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("skeleton: cannot open " + path);
    return parse_ntu_skeleton(in);
}

// Writes the text layout back out (17 significant digits, so parsing the
// result recovers every coordinate bit-exactly). Absent bodies are skipped;
// metadata fields the library does not model are written as zeros.
inline void write_ntu_skeleton(const SkeletonSequence& seq, std::ostream& out) {
    const int T = seq.frames(), V = seq.joints(), M = seq.bodies();
    std::vector<int> present;
    for (int m = 0; m < M; ++m)
        if (seq.body_present(m)) present.push_back(m);
    out << T << "\n";
    char buf[32];
    for (int t = 0; t < T; ++t) {
        out << present.size() << "\n";
        for (int m : present) {
            out << (m + 1) << " 0 0 0 0 0 0 0 0 0\n";
            out << V << "\n";
            for (int v = 0; v < V; ++v) {
                for (int c = 0; c < 3; ++c) {
                    std::snprintf(buf, sizeof buf, "%.17g", seq.coords.at(c, t, v, m));
                    out << (c ? " " : "") << buf;
                }
                out << " 0 0 0 0 0 0 0 0 2\n";
            }
        }
    }
}

// Fixed-length view of a sequence: shorter inputs get a zero tail, longer
// ones are truncated at the end.
inline SkeletonSequence pad_or_crop(const SkeletonSequence& seq, int target_frames = kDefaultFrames) {
    if (target_frames < 1) throw usage_error("pad_or_crop: target length must be positive");
    const int T = seq.frames(), V = seq.joints(), M = seq.bodies();
    SkeletonSequence out;
    out.coords = Tensor({3, target_frames, V, M});
    out.valid_frames = std::min(seq.valid_frames, target_frames);
    out.label = seq.label;
    const int copy = std::min(T, target_frames);
    for (int c = 0; c < 3; ++c)
        for (int t = 0; t < copy; ++t)
            for (int v = 0; v < V; ++v)
                for (int m = 0; m < M; ++m) out.coords.at(c, t, v, m) = seq.coords.at(c, t, v, m);
    return out;
}

// --- binary containers -------------------------------------------------------
//
// One sequence per file. Header: 4-byte magic, then little-endian int32
// fields; payload: little-endian IEEE doubles in channel-major order.

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t take_u32(std::istream& in, const std::string& what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw parse_error("binary container: truncated " + what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f64(std::ostream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline double take_f64(std::istream& in, const std::string& what) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) throw parse_error("binary container: truncated " + what);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace detail

// SKL1: raw 3-channel skeleton sequence.
inline void save_skl(const SkeletonSequence& seq, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("skl: cannot write " + path);
    out.write("SKL1", 4);
    detail::put_u32(out, static_cast<std::uint32_t>(seq.frames()));
    detail::put_u32(out, static_cast<std::uint32_t>(seq.joints()));
    detail::put_u32(out, static_cast<std::uint32_t>(seq.bodies()));
    detail::put_u32(out, static_cast<std::uint32_t>(seq.valid_frames));
    detail::put_u32(out, static_cast<std::uint32_t>(seq.label));
    for (std::int64_t i = 0; i < seq.coords.numel(); ++i) detail::put_f64(out, seq.coords[i]);
    if (!out) throw io_error("skl: write failed for " + path);
}

inline SkeletonSequence load_skl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("skl: cannot open " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "SKL1", 4) != 0)
        throw parse_error("skl: " + path + " is not an SKL1 file");
    const int T = static_cast<int>(detail::take_u32(in, "header"));
    const int V = static_cast<int>(detail::take_u32(in, "header"));
    const int M = static_cast<int>(detail::take_u32(in, "header"));
    SkeletonSequence seq;
    seq.valid_frames = static_cast<int>(detail::take_u32(in, "header"));
    seq.label = static_cast<std::int32_t>(detail::take_u32(in, "header"));
    seq.coords = Tensor({3, T, V, M});
    for (std::int64_t i = 0; i < seq.coords.numel(); ++i) seq.coords[i] = detail::take_f64(in, "payload");
    return seq;
}

}  // namespace resgcn
