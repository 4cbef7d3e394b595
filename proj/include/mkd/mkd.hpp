#pragma once

#include "mkd/tensor.hpp"
#include "mkd/ops.hpp"
#include "mkd/loss.hpp"
#include "mkd/optim.hpp"
#include "mkd/checkpoint.hpp"
#include "mkd/batch.hpp"
#include "mkd/encoder.hpp"
#include "mkd/data.hpp"
#include "mkd/eval.hpp"
#include "mkd/meta_teacher.hpp"
#include "mkd/distill.hpp"
#include "mkd/records.hpp"
#include "mkd/report.hpp"
#include "mkd/harness.hpp"
