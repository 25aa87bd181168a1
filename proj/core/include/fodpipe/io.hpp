#pragma once

#include <filesystem>
#include <vector>

#include "fodpipe/csd.hpp"
#include "fodpipe/evaluate.hpp"
#include "fodpipe/fodfield.hpp"
#include "fodpipe/kernel.hpp"
#include "fodpipe/tracking.hpp"

namespace fodpipe::io {

// Field files: `path` is a JSON sidecar; the samples live in `path` + ".raw"
// as little-endian float32. Readers throw DataError naming the file.
void write_fod(const std::filesystem::path& path, const FODField& field);
FODField read_fod(const std::filesystem::path& path);

void write_dwi(const std::filesystem::path& path, const DWISignal& dwi);
DWISignal read_dwi(const std::filesystem::path& path);

// "FPT1\n", uint32 count, then per streamline uint32 n and n float32 xyz triples.
void write_tractogram(const std::filesystem::path& path, const Tractogram& t);
Tractogram read_tractogram(const std::filesystem::path& path);

// Sidecar plus records of int32 ox, oy, oz, source, target and float32 value.
// The orientation set is regenerated from the stored tessellation level.
void write_kernel(const std::filesystem::path& path, const EnhancementKernel& k);
EnhancementKernel read_kernel(const std::filesystem::path& path);

void write_ground_truth(const std::filesystem::path& path, const GroundTruth& gt);
GroundTruth read_ground_truth(const std::filesystem::path& path);

void write_response(const std::filesystem::path& path, const ResponseFunction& r);
ResponseFunction read_response(const std::filesystem::path& path);

// {"points": [[x, y, z], ...]} in mm and/or {"voxels": [[i, j, k], ...]}.
SeedSpec read_seeds(const std::filesystem::path& path, const Grid& grid);
void write_seeds(const std::filesystem::path& path, const SeedSpec& seeds, const Grid& grid);
// {"voxels": [[i, j, k], ...]}, returned as sorted linear indices.
std::vector<std::size_t> read_region(const std::filesystem::path& path, const Grid& grid);
void write_region(const std::filesystem::path& path, const std::vector<std::size_t>& voxels, const Grid& grid);

}  // namespace fodpipe::io
