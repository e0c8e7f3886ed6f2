#pragma once

#include <cstdint>
#include <string>

#include "cstn/synth.hpp"

namespace cstn {

/// Everything a run needs, with a workable default for every field. The
/// file form is sectioned key = value text; any value can also be set on
/// the command line, which wins over the file.
struct TrainConfig {
    // [data] — dataset spec plus where it lives on disk
    DatasetSpec data;
    std::string data_dir = "data";

    // [model]
    double base_size = 2.5;
    int fpn_channels = 64;
    int loc_hidden = 32;
    bool use_cstn = true;

    // [train]
    std::uint64_t seed = 1;
    int epochs = 60;
    int batch = 32;
    double lr = 1e-3;
    std::string optimizer = "adam";
    double lambda = 1e-4;
    double alpha = 0.1;

    // [eval]
    bool use_transform_at_eval = true;
    int single_scale_level = -1; // -1 = both levels, 0 = fine, 1 = coarse

    // [out]
    std::string out_dir = "out";
    std::string checkpoint; // load path for eval/viz; save path for train
};

/// Parses sectioned key = value text over the defaults. '#' and ';' start
/// comments. Unknown sections or keys, and unparsable values, raise
/// ParseError with the byte offset of the offending line.
TrainConfig parse_config_text(const std::string& text);
TrainConfig load_config(const std::string& path);

/// Full snapshot, parseable by parse_config_text.
std::string config_to_text(const TrainConfig& c);

/// One "section.key=value" override (the CLI's --set). Unknown keys and
/// bad values raise the same errors as the file parser.
void apply_override(TrainConfig& c, const std::string& spec);

/// Range checks shared by every entry point: lambda/alpha >= 0, batch
/// >= 2, optimizer known, single_scale_level in {-1,0,1}, epochs >= 0.
void validate_config(const TrainConfig& c);

} // namespace cstn
