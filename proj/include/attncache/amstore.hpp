#pragma once

// Attention-map database: an append-only binary file of AttentionRecords,
// read back through a read-only memory mapping so that fetched maps are
// views into the mapped file rather than copies.
//
// File layout (little-endian, floats IEEE-754 binary32):
//
//   [header, 32 bytes]
//     magic "ACAM" | version u32 | num_layers u32 | num_heads u32 |
//     dtype u32 (0 = f32) | reserved u32 | record_count u64
//   [record blobs]
//     per record, layers 0..n-1 back to back; each layer blob holds the
//     heads' L x L maps head-major: num_heads * L * L floats
//   [directory footer]
//     per record: record_id u64 | seq_len u32 | num_layers u32 |
//                 num_layers x (offset u64, length u64)
//   [trailer] footer_offset u64 | magic "ACAM"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "attncache/binio.hpp"
#include "attncache/errors.hpp"
#include "attncache/model.hpp"

namespace attncache {

inline constexpr std::string_view kStoreMagic = "ACAM";
inline constexpr std::uint32_t kStoreVersion = 1;
inline constexpr std::uint32_t kStoreDtypeF32 = 0;
inline constexpr std::size_t kStoreHeaderBytes = 32;
inline constexpr std::size_t kStoreTrailerBytes = 12;

struct LayerSpan {
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
};

struct RecordDirectoryEntry {
    std::uint64_t record_id = 0;
    std::uint32_t seq_len = 0;
    std::vector<LayerSpan> layers;
};

namespace detail {

inline void write_directory(std::ostream& os, const std::vector<RecordDirectoryEntry>& dir) {
    for (const auto& e : dir) {
        binio::write_u64(os, e.record_id);
        binio::write_u32(os, e.seq_len);
        binio::write_u32(os, static_cast<std::uint32_t>(e.layers.size()));
        for (const auto& l : e.layers) {
            binio::write_u64(os, l.offset);
            binio::write_u64(os, l.length);
        }
    }
}

struct ParsedStore {
    std::uint32_t num_layers = 0;
    std::uint32_t num_heads = 0;
    std::uint64_t footer_offset = 0;
    std::vector<RecordDirectoryEntry> directory;
};

// Validates header, trailer and directory of a store image.
inline ParsedStore parse_store(std::span<const std::byte> img) {
    if (img.size() < kStoreHeaderBytes + kStoreTrailerBytes) throw FormatError("attention store: file too small");
    auto magic_at = [&](std::size_t off) {
        return std::string_view(reinterpret_cast<const char*>(img.data() + off), 4) == kStoreMagic;
    };
    if (!magic_at(0)) throw FormatError("attention store: bad header magic");
    if (!magic_at(img.size() - 4)) throw FormatError("attention store: bad trailer magic");
    const std::byte* p = img.data();
    if (binio::load<std::uint32_t>(p + 4) != kStoreVersion) throw FormatError("attention store: unsupported version");
    ParsedStore out;
    out.num_layers = binio::load<std::uint32_t>(p + 8);
    out.num_heads = binio::load<std::uint32_t>(p + 12);
    if (binio::load<std::uint32_t>(p + 16) != kStoreDtypeF32) throw FormatError("attention store: unknown dtype");
    const std::uint64_t count = binio::load<std::uint64_t>(p + 24);
    if (!out.num_layers || !out.num_heads) throw FormatError("attention store: zero layers or heads");
    out.footer_offset = binio::load<std::uint64_t>(p + img.size() - kStoreTrailerBytes);
    const std::uint64_t footer_end = img.size() - kStoreTrailerBytes;
    if (out.footer_offset < kStoreHeaderBytes || out.footer_offset > footer_end)
        throw FormatError("attention store: footer offset out of range");

    const std::uint64_t entry_bytes = 16 + 16ull * out.num_layers;
    if ((footer_end - out.footer_offset) != count * entry_bytes)
        throw FormatError("attention store: directory size does not match record count");
    out.directory.reserve(count);
    std::uint64_t expected_offset = kStoreHeaderBytes;
    const std::byte* q = p + out.footer_offset;
    for (std::uint64_t r = 0; r < count; ++r) {
        RecordDirectoryEntry e;
        e.record_id = binio::load<std::uint64_t>(q);
        e.seq_len = binio::load<std::uint32_t>(q + 8);
        if (binio::load<std::uint32_t>(q + 12) != out.num_layers)
            throw FormatError("attention store: record layer count differs from header");
        if (e.seq_len == 0) throw FormatError("attention store: zero-length record");
        const std::uint64_t blob = 4ull * out.num_heads * e.seq_len * e.seq_len;
        q += 16;
        e.layers.resize(out.num_layers);
        for (auto& l : e.layers) {
            l.offset = binio::load<std::uint64_t>(q);
            l.length = binio::load<std::uint64_t>(q + 8);
            q += 16;
            if (l.length != blob) throw FormatError("attention store: layer blob length mismatch");
            if (l.offset != expected_offset) throw FormatError("attention store: non-contiguous layer blobs");
            expected_offset += l.length;
        }
        out.directory.push_back(std::move(e));
    }
    if (expected_offset != out.footer_offset) throw FormatError("attention store: blob region does not end at footer");
    return out;
}

}  // namespace detail

// Single-writer builder of a store file. Records are appended; the
// directory footer and trailer are written by finish().
class AttnStoreWriter {
public:
    static AttnStoreWriter create(const std::filesystem::path& path, std::uint32_t num_layers,
                                  std::uint32_t num_heads) {
        if (!num_layers || !num_heads) throw InputError("AttnStoreWriter: layers and heads must be >= 1");
        AttnStoreWriter w(path, num_layers, num_heads);
        w.os_.open(path, std::ios::binary | std::ios::in | std::ios::out | std::ios::trunc);
        if (!w.os_) throw Error("cannot create attention store " + path.string());
        binio::write_magic(w.os_, kStoreMagic);
        binio::write_u32(w.os_, kStoreVersion);
        binio::write_u32(w.os_, num_layers);
        binio::write_u32(w.os_, num_heads);
        binio::write_u32(w.os_, kStoreDtypeF32);
        binio::write_u32(w.os_, 0);
        binio::write_u64(w.os_, 0);
        w.end_ = kStoreHeaderBytes;
        return w;
    }

    // Reopens a finished store for appending more records.
    static AttnStoreWriter append(const std::filesystem::path& path) {
        std::vector<std::byte> img(std::filesystem::file_size(path));
        {
            std::ifstream is(path, std::ios::binary);
            is.read(reinterpret_cast<char*>(img.data()), static_cast<std::streamsize>(img.size()));
            if (!is) throw FormatError("cannot read attention store " + path.string());
        }
        auto parsed = detail::parse_store(img);
        AttnStoreWriter w(path, parsed.num_layers, parsed.num_heads);
        w.directory_ = std::move(parsed.directory);
        for (const auto& e : w.directory_) w.ids_.emplace(e.record_id, 0);
        w.end_ = parsed.footer_offset;
        w.os_.open(path, std::ios::binary | std::ios::in | std::ios::out);
        if (!w.os_) throw Error("cannot open attention store " + path.string());
        w.os_.seekp(static_cast<std::streamoff>(w.end_));
        return w;
    }

    AttnStoreWriter(AttnStoreWriter&&) = default;
    AttnStoreWriter& operator=(AttnStoreWriter&&) = default;
    ~AttnStoreWriter() {
        try {
            finish();
        } catch (...) {
        }
    }

    std::size_t size() const { return directory_.size(); }
    const std::vector<RecordDirectoryEntry>& directory() const { return directory_; }

    void put_record(std::uint64_t id, const AttentionRecord& rec) {
        if (finished_) throw Error("AttnStoreWriter: store already finished");
        if (rec.num_layers != num_layers_ || rec.num_heads != num_heads_)
            throw ShapeError("put_record: record has " + std::to_string(rec.num_layers) + " layers / " +
                             std::to_string(rec.num_heads) + " heads, store expects " + std::to_string(num_layers_) +
                             " / " + std::to_string(num_heads_));
        if (rec.seq_len == 0 || rec.maps.size() != rec.num_layers * rec.layer_floats())
            throw ShapeError("put_record: malformed record");
        if (ids_.count(id)) throw InputError("put_record: duplicate record id " + std::to_string(id));
        RecordDirectoryEntry e{id, static_cast<std::uint32_t>(rec.seq_len), {}};
        for (std::size_t l = 0; l < num_layers_; ++l) {
            const auto blob = rec.layer(l);
            e.layers.push_back({end_, blob.size_bytes()});
            binio::write_floats(os_, blob);
            end_ += blob.size_bytes();
        }
        if (!os_) throw Error("put_record: write failed");
        ids_.emplace(id, directory_.size());
        directory_.push_back(std::move(e));
    }

    void finish() {
        if (finished_ || !os_.is_open()) return;
        finished_ = true;
        os_.seekp(static_cast<std::streamoff>(end_));
        detail::write_directory(os_, directory_);
        binio::write_u64(os_, end_);
        binio::write_magic(os_, kStoreMagic);
        const auto total = static_cast<std::uint64_t>(os_.tellp());
        os_.seekp(24);
        binio::write_u64(os_, directory_.size());
        os_.close();
        if (os_.fail()) throw Error("attention store: failed to finalize " + path_.string());
        std::filesystem::resize_file(path_, total);
    }

private:
    AttnStoreWriter(std::filesystem::path path, std::uint32_t layers, std::uint32_t heads)
        : path_(std::move(path)), num_layers_(layers), num_heads_(heads) {}

    std::filesystem::path path_;
    std::uint32_t num_layers_;
    std::uint32_t num_heads_;
    std::fstream os_;
    std::uint64_t end_ = 0;
    bool finished_ = false;
    std::vector<RecordDirectoryEntry> directory_;
    std::unordered_map<std::uint64_t, std::size_t> ids_;
};

namespace detail {

// Open-addressing id -> record table. Each slot carries what a view needs, so
// a lookup touches one slot and no directory entry.
class RecordTable {
public:
    struct Slot {
        std::uint64_t id = 0;
        std::uint64_t offset = 0;  // first layer blob
        std::uint32_t seq_len = 0;  // 0 marks an empty slot
        std::uint32_t index = 0;    // position in the directory
    };

    void build(const std::vector<RecordDirectoryEntry>& dir) {
        std::size_t cap = 16;
        while (cap < 2 * dir.size()) cap *= 2;
        slots_.assign(cap, Slot{});
        mask_ = cap - 1;
        for (std::size_t i = 0; i < dir.size(); ++i) {
            const auto& e = dir[i];
            std::size_t h = hash(e.record_id) & mask_;
            while (slots_[h].seq_len) {
                if (slots_[h].id == e.record_id) throw FormatError("attention store: duplicate record id in directory");
                h = (h + 1) & mask_;
            }
            slots_[h] = {e.record_id, e.layers.front().offset, e.seq_len, static_cast<std::uint32_t>(i)};
        }
    }

    const Slot* find(std::uint64_t id) const {
        if (slots_.empty()) return nullptr;
        for (std::size_t h = hash(id) & mask_;; h = (h + 1) & mask_) {
            const Slot& s = slots_[h];
            if (!s.seq_len) return nullptr;
            if (s.id == id) return &s;
        }
    }

private:
    static std::uint64_t hash(std::uint64_t x) {
        x ^= x >> 30;
        x *= 0xbf58476d1ce4e5b9ull;
        x ^= x >> 27;
        x *= 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    std::vector<Slot> slots_;
    std::size_t mask_ = 0;
};

// Owns the mapping. The region stays mapped while any reference exists;
// `open` is cleared by AttnStore::close() so later view access fails.
struct StoreMapping {
    void* addr = nullptr;
    std::size_t length = 0;
    std::atomic<bool> open{true};
    std::uint32_t num_layers = 0;
    std::uint32_t num_heads = 0;
    std::vector<RecordDirectoryEntry> directory;
    RecordTable by_id;

    const std::byte* bytes() const { return static_cast<const std::byte*>(addr); }

    StoreMapping() = default;
    StoreMapping(const StoreMapping&) = delete;
    StoreMapping& operator=(const StoreMapping&) = delete;
    ~StoreMapping() {
        if (addr) ::munmap(addr, length);
    }
};

}  // namespace detail

// Read-only view of one record's maps inside the mapped file. Creating and
// reading a view copies no map bytes and allocates nothing.
class MappedAttnView {
public:
    std::uint64_t record_id() const { return slot_.id; }
    std::size_t seq_len() const { return slot_.seq_len; }
    std::size_t num_layers() const { return layers_; }
    std::size_t num_heads() const { return state()->num_heads; }

    std::span<const float> layer(std::size_t l) const {
        const auto m = state();
        if (l >= layers_) throw InputError("MappedAttnView: layer out of range");
        const std::size_t floats = std::size_t{m->num_heads} * slot_.seq_len * slot_.seq_len;
        return {reinterpret_cast<const float*>(m->bytes() + slot_.offset) + l * floats, floats};
    }

    MatrixView map(std::size_t l, std::size_t head) const {
        const std::size_t L = seq_len();
        return {layer(l).data() + head * L * L, L, L};
    }

    // All layers; contiguous because blobs of a record are stored back to back.
    std::span<const float> region() const {
        const auto first = layer(0);
        return {first.data(), first.size() * layers_};
    }

    // Attention cache borrowing this view's memory; pins the mapping until
    // the cache is destroyed.
    AttnCache to_cache() const {
        std::shared_ptr<const detail::StoreMapping> pin = state();
        const std::size_t heads = pin->num_heads;
        const auto maps = region();
        return AttnCache(record_id(), seq_len(), layers_, heads, maps, std::move(pin));
    }

private:
    friend class AttnStore;
    MappedAttnView(std::weak_ptr<const detail::StoreMapping> m, const detail::RecordTable::Slot& slot,
                   std::size_t layers)
        : mapping_(std::move(m)), slot_(slot), layers_(layers) {}

    std::shared_ptr<const detail::StoreMapping> state() const {
        auto m = mapping_.lock();
        if (!m || !m->open.load(std::memory_order_acquire))
            throw Error("MappedAttnView: attention store has been closed");
        return m;
    }

    std::weak_ptr<const detail::StoreMapping> mapping_;
    detail::RecordTable::Slot slot_;
    std::size_t layers_;
};

// Reader over a finished store file. After open(), get_maps may be called
// from any number of threads; views must not be used after close().
class AttnStore {
public:
    AttnStore() = default;

    static AttnStore open(const std::filesystem::path& path) {
        const int fd = ::open(path.c_str(), O_RDONLY);
        if (fd < 0) throw FormatError("cannot open attention store " + path.string() + ": " + std::strerror(errno));
        struct stat st {};
        if (::fstat(fd, &st) != 0) {
            ::close(fd);
            throw FormatError("cannot stat attention store " + path.string());
        }
        auto m = std::make_shared<detail::StoreMapping>();
        m->length = static_cast<std::size_t>(st.st_size);
        if (m->length < kStoreHeaderBytes + kStoreTrailerBytes) {
            ::close(fd);
            throw FormatError("attention store: file too small");
        }
        void* addr = ::mmap(nullptr, m->length, PROT_READ, MAP_SHARED, fd, 0);
        ::close(fd);
        if (addr == MAP_FAILED) throw FormatError("cannot map attention store " + path.string());
        m->addr = addr;
        auto parsed = detail::parse_store({m->bytes(), m->length});
        m->num_layers = parsed.num_layers;
        m->num_heads = parsed.num_heads;
        m->directory = std::move(parsed.directory);
        m->by_id.build(m->directory);
        AttnStore s;
        s.mapping_ = std::move(m);
        return s;
    }

    bool is_open() const { return mapping_ != nullptr; }
    std::size_t size() const { return live().directory.size(); }
    std::uint32_t num_layers() const { return live().num_layers; }
    std::uint32_t num_heads() const { return live().num_heads; }
    bool contains(std::uint64_t id) const { return live().by_id.find(id) != nullptr; }
    const std::vector<RecordDirectoryEntry>& directory() const { return live().directory; }

    MappedAttnView get_maps(std::uint64_t id, std::size_t n_layers) const {
        const auto& m = live();
        if (n_layers != m.num_layers)
            throw InputError("get_maps: requested " + std::to_string(n_layers) + " layers, store has " +
                             std::to_string(m.num_layers));
        const auto* slot = m.by_id.find(id);
        if (!slot) throw NotFoundError("get_maps: unknown record id " + std::to_string(id));
        return MappedAttnView(mapping_, *slot, n_layers);
    }

    // Copies a record out of the store.
    AttentionRecord read_record(std::uint64_t id) const {
        const auto view = get_maps(id, num_layers());
        AttentionRecord rec(view.seq_len(), view.num_layers(), view.num_heads());
        const auto src = view.region();
        std::copy(src.begin(), src.end(), rec.maps.begin());
        return rec;
    }

    void close() {
        if (mapping_) mapping_->open.store(false, std::memory_order_release);
        mapping_.reset();
    }

private:
    const detail::StoreMapping& live() const {
        if (!mapping_) throw Error("attention store is closed");
        return *mapping_;
    }

    std::shared_ptr<detail::StoreMapping> mapping_;
};

}  // namespace attncache
