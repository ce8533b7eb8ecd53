// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <sstream>

#include "binary_io.hpp"
#include "omni/ctc.hpp"
#include "omni/data.hpp"
#include "omni/error.hpp"

namespace omni {

void write_feat_file(const std::filesystem::path& path, const Utterance& utt) {
  if (utt.features.size() != utt.frames * utt.feat_dim) {
    throw IntegrityError("feat: utterance " + utt.id + " has inconsistent feature storage");
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("feat: cannot open " + path.string() + " for writing");
  os.write("FEAT", 4);
  io::put_u32(os, kFeatVersion);
  io::put_u32(os, static_cast<std::uint32_t>(utt.frames));
  io::put_u32(os, static_cast<std::uint32_t>(utt.feat_dim));
  for (float v : utt.features) io::put_f32(os, v);
  if (!os) throw FormatError("feat: write failed for " + path.string());
}

void read_feat_file(const std::filesystem::path& path, Utterance& utt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("feat: cannot open " + path.string());
  io::Reader r(is, "feat " + path.string());
  r.magic("FEAT");
  const std::uint32_t version = r.u32();
  if (version != kFeatVersion) {
    throw VersionMismatchError("feat " + path.string() + ": unsupported version " +
                               std::to_string(version));
  }
  utt.frames = r.u32();
  utt.feat_dim = r.u32();
  const std::uintmax_t need = 16 + std::uintmax_t{4} * utt.frames * utt.feat_dim;
  if (std::filesystem::file_size(path) < need) {
    throw TruncatedFileError("feat " + path.string() + ": header promises " +
                             std::to_string(utt.frames) + "x" + std::to_string(utt.feat_dim) +
                             " values, file is too short");
  }
  utt.features.resize(utt.frames * utt.feat_dim);
  for (auto& v : utt.features) v = r.f32();
  if (!r.at_end()) throw IntegrityError("feat " + path.string() + ": trailing bytes");
}

void save_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  std::filesystem::create_directories(dir / "feats");
  std::ofstream manifest(dir / "manifest.tsv", std::ios::trunc);
  if (!manifest) throw FormatError("corpus: cannot write manifest in " + dir.string());
  for (const auto& utt : corpus) {
    if (utt.id.find_first_of("\t\n/") != std::string::npos ||
        utt.transcript.find_first_of("\t\n") != std::string::npos) {
      throw IntegrityError("corpus: utterance " + utt.id + " has a tab or newline in a field");
    }
    const std::string rel = "feats/" + utt.id + ".feat";
    write_feat_file(dir / rel, utt);
    manifest << utt.id << '\t' << rel << '\t' << utt.frames << '\t' << utt.transcript << '\n';
  }
}

Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.tsv");
  if (!manifest) throw FormatError("corpus: no manifest.tsv in " + dir.string());
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (int i = 0; i < 3; ++i) {
      const std::size_t tab = line.find('\t', start);
      if (tab == std::string::npos) {
        throw FormatError("corpus: manifest line " + std::to_string(line_no) +
                          " does not have 4 tab-separated fields");
      }
      fields.push_back(line.substr(start, tab - start));
      start = tab + 1;
    }
    fields.push_back(line.substr(start));
    Utterance utt;
    utt.id = fields[0];
    std::size_t declared = 0;
    try {
      std::size_t used = 0;
      declared = std::stoul(fields[2], &used);
      if (used != fields[2].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw FormatError("corpus: manifest line " + std::to_string(line_no) + " has bad frame count");
    }
    read_feat_file(dir / fields[1], utt);
    if (utt.frames != declared) {
      throw IntegrityError("corpus: utterance " + utt.id + " manifest says " +
                           std::to_string(declared) + " frames, feature file has " +
                           std::to_string(utt.frames));
    }
    utt.transcript = fields[3];
    corpus.push_back(std::move(utt));
  }
  return corpus;
}

Batch make_batch(const Corpus& corpus, std::span<const std::size_t> indices,
                 const Tokenizer& tokenizer, std::size_t frame_stack) {
  if (indices.empty()) throw ContractError("make_batch: no utterances");
  Batch b;
  b.feat_dim = corpus[indices[0]].feat_dim;
  for (std::size_t i : indices) b.max_frames = std::max(b.max_frames, corpus.at(i).frames);
  b.features.assign(indices.size() * b.max_frames * b.feat_dim, 0.0f);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Utterance& u = corpus[indices[k]];
    if (u.feat_dim != b.feat_dim) {
      throw IntegrityError("make_batch: utterance " + u.id + " has feat_dim " +
                           std::to_string(u.feat_dim) + ", batch uses " + std::to_string(b.feat_dim));
    }
    std::copy(u.features.begin(), u.features.end(),
              b.features.begin() + static_cast<std::ptrdiff_t>(k * b.max_frames * b.feat_dim));
    TokenSeq target = tokenizer.encode(u.transcript);
    if (stacked_length(u.frames, frame_stack) < ctc_min_frames(target)) {
      throw InfeasibleTargetError("make_batch: utterance " + u.id + " is too short for its transcript");
    }
    b.lengths.push_back(u.frames);
    b.targets.push_back(std::move(target));
    b.ids.push_back(u.id);
  }
  return b;
}

std::vector<std::vector<std::size_t>> pack_batches(const Corpus& corpus,
                                                   std::span<const std::size_t> order,
                                                   std::size_t max_frames) {
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> current;
  std::size_t frames = 0;
  for (std::size_t i : order) {
    const std::size_t f = corpus.at(i).frames;
    if (!current.empty() && frames + f > max_frames) {
      batches.push_back(std::move(current));
      current.clear();
      frames = 0;
    }
    current.push_back(i);
    frames += f;
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

std::pair<Corpus, Corpus> split_corpus(const Corpus& corpus, double heldout_fraction) {
  if (heldout_fraction < 0 || heldout_fraction >= 1) {
    throw ConfigError("heldout_fraction", "heldout_fraction must be in [0, 1)");
  }
  const auto held = static_cast<std::size_t>(
      std::llround(heldout_fraction * static_cast<double>(corpus.size())));
  const std::size_t cut = corpus.size() - held;
  return {Corpus(corpus.begin(), corpus.begin() + static_cast<std::ptrdiff_t>(cut)),
          Corpus(corpus.begin() + static_cast<std::ptrdiff_t>(cut), corpus.end())};
}

}  // namespace omni
